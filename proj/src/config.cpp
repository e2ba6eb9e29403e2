#include "hiptune/config.hpp"

#include "hiptune/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace hiptune {
namespace {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

// Strict reader: records which keys were consumed and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    auto it = j_.find(key);
    used_.insert(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename F>
  void object(const char* key, F&& f) {
    auto it = j_.find(key);
    used_.insert(key);
    if (it == j_.end()) return;
    Reader r(*it, where_ + "." + key);
    f(r);
    r.finish();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError("unknown key " + where_ + "." + it.key());
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

}  // namespace

const char* to_string(Comparator c) {
  switch (c) {
    case Comparator::HiPTune: return "hiptune";
    case Comparator::ClipV: return "clip-v";
    case Comparator::CoopUnified: return "coop-unified";
    case Comparator::CoopSpecific: return "coop-specific";
  }
  return "?";
}

Comparator parse_comparator(const std::string& s) {
  for (Comparator c : all_comparators()) {
    if (s == to_string(c)) return c;
  }
  throw ConfigError("unknown comparator '" + s + "' (expected hiptune, clip-v, coop-unified or coop-specific)");
}

std::vector<Comparator> all_comparators() {
  return {Comparator::ClipV, Comparator::CoopUnified, Comparator::CoopSpecific, Comparator::HiPTune};
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  pretrain.validate();
  loss.validate();
  coop.validate();
  coop_train.validate();
  protocol_options.validate();
  if (data.image_size != model.encoder.image_size || data.patch_size != model.encoder.patch_size) {
    throw ConfigError("data image/patch size must match the encoder's");
  }
  if (threshold_policy != "fixed" && threshold_policy != "dev-eer") {
    throw ConfigError("threshold_policy must be 'fixed' or 'dev-eer'");
  }
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("threshold must lie in [0, 1]");
  if (comparators.empty()) throw ConfigError("at least one comparator is required");
  (void)taxonomy();
}

AttackTaxonomy RunConfig::taxonomy() const {
  return leaf_counts.empty() ? build_taxonomy() : build_taxonomy(leaf_counts);
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Reader root(j, "config");
  root.get("seed", c.seed);
  root.object("data", [&](Reader& r) {
    r.get("identities", c.data.n_identities);
    r.get("frames_per_method", c.data.frames_per_method);
    r.get("image_size", c.data.image_size);
    r.get("patch_size", c.data.patch_size);
    r.get("signal_amplitude", c.data.signal_amplitude);
    r.get("noise_std", c.data.noise_std);
    r.get("variant_spread", c.data.variant_spread);
    r.get("seed", c.data.seed);
    r.get("leaf_counts", c.leaf_counts);
  });
  // The encoder always follows the data geometry.
  c.model.encoder.image_size = c.data.image_size;
  c.model.encoder.patch_size = c.data.patch_size;
  root.object("model", [&](Reader& r) {
    auto& e = c.model.encoder;
    r.get("visual_dim", e.visual_dim);
    r.get("text_dim", e.text_dim);
    r.get("layers", e.n_layers);
    r.get("heads", e.n_heads);
    r.get("mlp_ratio", e.mlp_ratio);
    r.get("temperature", e.temperature);
    r.get("prompt_length", c.model.prompt_length);
    r.get("theta", c.model.gates.theta);
    r.get("dpi_attention", c.model.dpi_attention);
    int forced = 0;  // 0: adaptive
    r.get("fadc_forced_dilation", forced);
    c.model.gates.fadc.forced_dilation = forced != 0 ? std::optional<int>(forced) : std::nullopt;
  });
  root.object("pretrain", [&](Reader& r) {
    r.get("epochs", c.pretrain.epochs);
    r.get("lr", c.pretrain.lr);
    r.get("batch_size", c.pretrain.batch_size);
  });
  root.object("loss", [&](Reader& r) {
    r.get("margin", c.loss.margin);
    r.get("triplet_weight", c.loss.triplet_weight);
    r.get("routing_weight", c.loss.routing_weight);
    r.get("lr_stage1", c.loss.lr_stage1);
    r.get("lr_stage2", c.loss.lr_stage2);
    r.get("batch_size", c.loss.batch_size);
    r.get("epochs_stage1", c.loss.epochs_stage1);
    r.get("epochs_stage2", c.loss.epochs_stage2);
    r.get("joint_finetune", c.loss.joint_finetune);
  });
  root.object("baseline", [&](Reader& r) {
    r.get("context_length", c.coop.context_length);
    r.get("epochs", c.coop_train.epochs);
    r.get("lr", c.coop_train.lr);
    r.get("batch_size", c.coop_train.batch_size);
  });
  root.object("evaluation", [&](Reader& r) {
    std::string protocol = to_string(c.protocol);
    r.get("protocol", protocol);
    c.protocol = parse_protocol(protocol);
    r.get("p1_val", c.protocol_options.p1_val);
    r.get("p1_test", c.protocol_options.p1_test);
    r.get("threshold_policy", c.threshold_policy);
    r.get("threshold", c.threshold);
    std::vector<std::string> comps;
    r.get("comparators", comps);
    if (!comps.empty()) {
      c.comparators.clear();
      for (const auto& s : comps) c.comparators.push_back(parse_comparator(s));
    }
    r.get("seeds", c.seeds);
  });
  root.finish();
  c.model.encoder.max_text_len =
      std::max({c.model.encoder.max_text_len, c.model.prompt_length + 1, c.coop.context_length + 1});
  c.validate();
  return c;
}

std::string run_config_to_json(const RunConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["data"] = {{"identities", c.data.n_identities},
               {"frames_per_method", c.data.frames_per_method},
               {"image_size", c.data.image_size},
               {"patch_size", c.data.patch_size},
               {"signal_amplitude", c.data.signal_amplitude},
               {"noise_std", c.data.noise_std},
               {"variant_spread", c.data.variant_spread},
               {"seed", c.data.seed},
               {"leaf_counts", c.leaf_counts}};
  const auto& e = c.model.encoder;
  j["model"] = {{"visual_dim", e.visual_dim},
                {"text_dim", e.text_dim},
                {"layers", e.n_layers},
                {"heads", e.n_heads},
                {"mlp_ratio", e.mlp_ratio},
                {"temperature", e.temperature},
                {"prompt_length", c.model.prompt_length},
                {"theta", c.model.gates.theta},
                {"dpi_attention", c.model.dpi_attention},
                {"fadc_forced_dilation", c.model.gates.fadc.forced_dilation.value_or(0)}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr}, {"batch_size", c.pretrain.batch_size}};
  j["loss"] = {{"margin", c.loss.margin},
               {"triplet_weight", c.loss.triplet_weight},
               {"routing_weight", c.loss.routing_weight},
               {"lr_stage1", c.loss.lr_stage1},
               {"lr_stage2", c.loss.lr_stage2},
               {"batch_size", c.loss.batch_size},
               {"epochs_stage1", c.loss.epochs_stage1},
               {"epochs_stage2", c.loss.epochs_stage2},
               {"joint_finetune", c.loss.joint_finetune}};
  j["baseline"] = {{"context_length", c.coop.context_length},
                   {"epochs", c.coop_train.epochs},
                   {"lr", c.coop_train.lr},
                   {"batch_size", c.coop_train.batch_size}};
  std::vector<std::string> comps;
  for (Comparator k : c.comparators) comps.emplace_back(to_string(k));
  j["evaluation"] = {{"protocol", to_string(c.protocol)},
                     {"p1_val", c.protocol_options.p1_val},
                     {"p1_test", c.protocol_options.p1_test},
                     {"threshold_policy", c.threshold_policy},
                     {"threshold", c.threshold},
                     {"comparators", comps},
                     {"seeds", c.seeds}};
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read run config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return run_config_from_json(ss.str());
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write run config " + path.string());
  f << run_config_to_json(config);
}

}  // namespace hiptune
