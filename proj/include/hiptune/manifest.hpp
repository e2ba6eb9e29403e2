#pragma once

#include "hiptune/taxonomy.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace hiptune {

enum class Split { Train, Val, Test, Unassigned };

const char* to_string(Split s);
Split parse_split(const std::string& s);

struct SampleLabel {
  int identity = 0;
  bool is_live = true;
  std::optional<HierPath> path;  // none for live samples
  std::optional<int> method;     // none for live samples

  static SampleLabel live(int identity);
  static SampleLabel fake(const AttackTaxonomy& taxonomy, int identity, int method);

  // is_live <=> no path <=> no method, and a fake path is a parent chain
  // ending at the method's node. Throws LabelError otherwise.
  void validate(const AttackTaxonomy& taxonomy) const;
};

struct ManifestRecord {
  std::string file;  // relative to the manifest's directory
  int identity = 0;
  bool is_live = true;
  std::optional<HierPath> path;
  std::optional<int> method;
  Split split = Split::Unassigned;

  SampleLabel label() const;
  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct Manifest {
  // Methods per level-3 node of the default structure; empty means the
  // default counts.
  std::vector<int> leaf_counts;
  std::vector<ManifestRecord> records;

  AttackTaxonomy taxonomy() const;
  std::vector<std::size_t> indices(Split s) const;
  friend bool operator==(const Manifest&, const Manifest&) = default;
};

inline constexpr int kManifestSchemaVersion = 1;

// Throws ValidationError naming the first offending record index.
void validate_manifest(const Manifest& manifest, const AttackTaxonomy& taxonomy);

// Line-delimited UTF-8: a version header, a column header, then one
// tab-separated record per line. Absent ids are written as "-".
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

}  // namespace hiptune
