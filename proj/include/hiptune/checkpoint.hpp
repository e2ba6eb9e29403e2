#pragma once

// Versioned binary checkpoint: named parameter blocks with shape headers
// plus string metadata (taxonomy fingerprint, CDC theta, stage, config).
//
//   "HPTC" u32 version
//   u32 n_meta  { u32 len key, u32 len value }*
//   u32 n_blocks { u32 len name, u32 rows, u32 cols, f64[rows*cols] }*
// All integers and floats little-endian.

#include "hiptune/autograd.hpp"
#include "hiptune/training.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hiptune {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlock {
  std::string name;
  Matrix value;
  friend bool operator==(const CheckpointBlock&, const CheckpointBlock&) = default;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointBlock> blocks;

  const CheckpointBlock* find(const std::string& name) const;
  void add(const std::vector<const Parameter*>& params, const std::string& prefix = "");
  // Copies blocks into the parameters. Throws ConfigError on a missing
  // block or a shape mismatch.
  void restore(const std::vector<Parameter*>& params, const std::string& prefix = "") const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Model <-> checkpoint. restore_model rejects checkpoints written for a
// different taxonomy or CDC theta.
Checkpoint model_checkpoint(const HiptuneModel& model, int stage);
void restore_model(const Checkpoint& checkpoint, HiptuneModel& model);

}  // namespace hiptune
