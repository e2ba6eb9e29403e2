#include "hiptune/checkpoint.hpp"

#include "hiptune/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hiptune {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError("truncated checkpoint");
  return v;
}

std::string get_str(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  if (n > (1u << 28)) throw IoError("corrupt checkpoint string length");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("truncated checkpoint");
  return s;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

}  // namespace

const CheckpointBlock* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

void Checkpoint::add(const std::vector<const Parameter*>& params, const std::string& prefix) {
  for (const Parameter* p : params) {
    if (find(prefix + p->name)) throw ContractError("duplicate checkpoint block " + prefix + p->name);
    blocks.push_back({prefix + p->name, p->value});
  }
}

void Checkpoint::restore(const std::vector<Parameter*>& params, const std::string& prefix) const {
  for (Parameter* p : params) {
    const CheckpointBlock* b = find(prefix + p->name);
    if (!b) throw ConfigError("checkpoint has no block " + prefix + p->name);
    if (b->value.rows() != p->value.rows() || b->value.cols() != p->value.cols()) {
      std::ostringstream os;
      os << "checkpoint block " << b->name << " is " << b->value.rows() << "x" << b->value.cols()
         << ", expected " << p->value.rows() << "x" << p->value.cols();
      throw ConfigError(os.str());
    }
    p->value = b->value;
  }
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write("HPTC", 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    put_str(os, k);
    put_str(os, v);
  }
  put_u32(os, static_cast<std::uint32_t>(ck.blocks.size()));
  for (const auto& b : ck.blocks) {
    put_str(os, b.name);
    put_u32(os, static_cast<std::uint32_t>(b.value.rows()));
    put_u32(os, static_cast<std::uint32_t>(b.value.cols()));
    os.write(reinterpret_cast<const char*>(b.value.data()),
             static_cast<std::streamsize>(b.value.size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "HPTC", 4) != 0) throw IoError(path.string() + " is not a checkpoint");
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const std::uint32_t n_meta = get_u32(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = get_str(is);
    ck.meta[k] = get_str(is);
  }
  const std::uint32_t n_blocks = get_u32(is);
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    CheckpointBlock b;
    b.name = get_str(is);
    const std::uint32_t rows = get_u32(is), cols = get_u32(is);
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 28)) throw IoError("corrupt checkpoint block " + b.name);
    b.value.resize(rows, cols);
    if (!is.read(reinterpret_cast<char*>(b.value.data()),
                 static_cast<std::streamsize>(b.value.size() * sizeof(double)))) {
      throw IoError("truncated checkpoint block " + b.name);
    }
    ck.blocks.push_back(std::move(b));
  }
  return ck;
}

Checkpoint model_checkpoint(const HiptuneModel& model, int stage) {
  Checkpoint ck;
  ck.meta["taxonomy_fingerprint"] = hex(model.taxonomy.fingerprint());
  std::ostringstream theta;
  theta.precision(17);
  theta << model.gates.theta();
  ck.meta["theta"] = theta.str();
  ck.meta["stage"] = std::to_string(stage);
  ck.meta["prompt_length"] = std::to_string(model.tree.prompt_length());
  ck.meta["encoder_frozen"] = model.encoder.frozen() ? "1" : "0";
  ck.add(model.encoder.parameters());
  ck.add(model.tree.parameters());
  ck.add(model.gates.parameters());
  ck.add(model.dpi.parameters());
  return ck;
}

void restore_model(const Checkpoint& ck, HiptuneModel& model) {
  auto it = ck.meta.find("taxonomy_fingerprint");
  if (it == ck.meta.end() || it->second != hex(model.taxonomy.fingerprint())) {
    throw ConfigError("checkpoint was written for a different taxonomy");
  }
  it = ck.meta.find("theta");
  if (it == ck.meta.end() || std::stod(it->second) != model.gates.theta()) {
    throw ConfigError("checkpoint CDC theta does not match the configuration");
  }
  ck.restore(model.encoder.parameters());
  ck.restore(model.tree.parameters());
  ck.restore(model.gates.parameters());
  ck.restore(model.dpi.parameters());
  it = ck.meta.find("encoder_frozen");
  if (it != ck.meta.end() && it->second == "1") {
    model.encoder.freeze();
  } else {
    model.encoder.unfreeze();
  }
}

}  // namespace hiptune
