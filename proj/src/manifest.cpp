#include "hiptune/manifest.hpp"

#include "hiptune/errors.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace hiptune {

namespace {

constexpr const char* kMagic = "#hiptune-manifest";
constexpr const char* kColumns = "file\tidentity\tis_live\tl1\tl2\tl3\tmethod\tsplit";

std::vector<std::string> split_on(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

int parse_int(const std::string& s, std::size_t line_no) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ValidationError("manifest line " + std::to_string(line_no) + ": bad integer '" + s + "'");
  }
  return v;
}

std::optional<int> parse_opt(const std::string& s, std::size_t line_no) {
  if (s == "-") return std::nullopt;
  return parse_int(s, line_no);
}

std::string opt_str(std::optional<int> v) { return v ? std::to_string(*v) : "-"; }

}  // namespace

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "unassigned") return Split::Unassigned;
  throw ValidationError("unknown split tag '" + s + "'");
}

SampleLabel SampleLabel::live(int identity) {
  SampleLabel l;
  l.identity = identity;
  l.is_live = true;
  return l;
}

SampleLabel SampleLabel::fake(const AttackTaxonomy& taxonomy, int identity, int method) {
  SampleLabel l;
  l.identity = identity;
  l.is_live = false;
  l.method = method;
  l.path = taxonomy.path_of_method(method);
  return l;
}

void SampleLabel::validate(const AttackTaxonomy& taxonomy) const {
  if (is_live) {
    if (path || method) throw LabelError("live sample carries an attack path or method");
    return;
  }
  if (!path || !method) throw LabelError("fake sample without attack path or method");
  if (!taxonomy.is_parent_chain(*path)) throw LabelError("attack path is not a parent chain");
  if (*method < 0 || *method >= static_cast<int>(taxonomy.method_count())) {
    throw LabelError("unknown method id " + std::to_string(*method));
  }
  if (taxonomy.method(*method).node != path->l3) {
    throw LabelError("method " + std::to_string(*method) + " does not belong to node " +
                     std::to_string(path->l3));
  }
}

SampleLabel ManifestRecord::label() const {
  SampleLabel l;
  l.identity = identity;
  l.is_live = is_live;
  l.path = path;
  l.method = method;
  return l;
}

AttackTaxonomy Manifest::taxonomy() const {
  return leaf_counts.empty() ? build_taxonomy() : build_taxonomy(leaf_counts);
}

std::vector<std::size_t> Manifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == s) out.push_back(i);
  }
  return out;
}

void validate_manifest(const Manifest& manifest, const AttackTaxonomy& taxonomy) {
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const ManifestRecord& r = manifest.records[i];
    try {
      if (r.path) {
        for (int level = 1; level <= 3; ++level) {
          if (!taxonomy.contains(r.path->at(level))) {
            throw LabelError("unresolvable node id " + std::to_string(r.path->at(level)));
          }
        }
      }
      r.label().validate(taxonomy);
    } catch (const LabelError& e) {
      throw ValidationError("manifest record " + std::to_string(i) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("manifest record " + std::to_string(i) + ": " + e.what());
    }
  }
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << kMagic << "\tv" << kManifestSchemaVersion << "\tleaves=";
  for (std::size_t i = 0; i < manifest.leaf_counts.size(); ++i) {
    out << (i ? "," : "") << manifest.leaf_counts[i];
  }
  out << '\n' << kColumns << '\n';
  for (const auto& r : manifest.records) {
    out << r.file << '\t' << r.identity << '\t' << (r.is_live ? 1 : 0) << '\t'
        << opt_str(r.path ? std::optional<int>(r.path->l1) : std::nullopt) << '\t'
        << opt_str(r.path ? std::optional<int>(r.path->l2) : std::nullopt) << '\t'
        << opt_str(r.path ? std::optional<int>(r.path->l3) : std::nullopt) << '\t'
        << opt_str(r.method) << '\t' << to_string(r.split) << '\n';
  }
  if (!out) throw IoError("failed writing manifest " + path.string());
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  bool seen_header = false;
  bool seen_columns = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!seen_header) {
      auto fields = split_on(line, '\t');
      if (fields.size() < 3 || fields[0] != kMagic) {
        throw ValidationError("manifest line 1: missing '#hiptune-manifest' header");
      }
      if (fields[1] != "v" + std::to_string(kManifestSchemaVersion)) {
        throw ValidationError("unsupported manifest schema version '" + fields[1] + "'");
      }
      if (fields[2].rfind("leaves=", 0) != 0) throw ValidationError("manifest header lacks leaves=");
      const std::string counts = fields[2].substr(7);
      if (!counts.empty()) {
        for (const auto& c : split_on(counts, ',')) m.leaf_counts.push_back(parse_int(c, line_no));
      }
      seen_header = true;
      continue;
    }
    if (!seen_columns) {
      if (line != kColumns) throw ValidationError("manifest line 2: unexpected column header");
      seen_columns = true;
      continue;
    }
    auto f = split_on(line, '\t');
    if (f.size() != 8) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": expected 8 fields");
    }
    ManifestRecord r;
    r.file = f[0];
    r.identity = parse_int(f[1], line_no);
    const int live = parse_int(f[2], line_no);
    if (live != 0 && live != 1) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": is_live must be 0/1");
    }
    r.is_live = live == 1;
    auto l1 = parse_opt(f[3], line_no), l2 = parse_opt(f[4], line_no), l3 = parse_opt(f[5], line_no);
    if (l1 || l2 || l3) {
      if (!(l1 && l2 && l3)) {
        throw ValidationError("manifest line " + std::to_string(line_no) + ": partial attack path");
      }
      r.path = HierPath{*l1, *l2, *l3};
    }
    r.method = parse_opt(f[6], line_no);
    r.split = parse_split(f[7]);
    m.records.push_back(std::move(r));
  }
  if (!m.records.empty() || seen_header) validate_manifest(m, m.taxonomy());
  return m;
}

}  // namespace hiptune
