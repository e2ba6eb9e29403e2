#pragma once

// Run configuration as a JSON document. Unknown keys and wrong types are
// configuration errors; omitted keys keep their defaults.

#include "hiptune/dataset.hpp"
#include "hiptune/encoders.hpp"
#include "hiptune/protocols.hpp"
#include "hiptune/training.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hiptune {

enum class Comparator { HiPTune, ClipV, CoopUnified, CoopSpecific };

const char* to_string(Comparator c);
Comparator parse_comparator(const std::string& s);  // hiptune, clip-v, coop-unified, coop-specific
std::vector<Comparator> all_comparators();

struct RunConfig {
  std::uint64_t seed = 7;
  GeneratorConfig data;
  std::vector<int> leaf_counts;  // per level-3 node; empty = default 54 methods
  ModelConfig model;
  PretrainConfig pretrain;
  LossConfig loss;
  BaselineConfig coop;
  BaselineTrainConfig coop_train;
  ProtocolId protocol = ProtocolId::P1;
  ProtocolOptions protocol_options;
  std::string threshold_policy = "fixed";  // or "dev-eer"
  double threshold = 0.5;
  std::vector<Comparator> comparators = all_comparators();
  std::vector<std::uint64_t> seeds;  // multi-seed runs; empty = {seed}

  void validate() const;
  AttackTaxonomy taxonomy() const;
};

RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

}  // namespace hiptune
