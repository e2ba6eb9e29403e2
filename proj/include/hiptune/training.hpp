#pragma once

// Pretraining substitute for the frozen encoder, the two HiPTune training
// stages, and the flat-prompt baseline trainer.

#include "hiptune/app.hpp"
#include "hiptune/dataset.hpp"
#include "hiptune/dpi.hpp"
#include "hiptune/encoders.hpp"
#include "hiptune/manifest.hpp"
#include "hiptune/taxonomy.hpp"
#include "hiptune/vptree.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace hiptune {

struct ModelConfig {
  EncoderConfig encoder;
  int prompt_length = 8;
  GateConfig gates;
  bool dpi_attention = true;
  void validate() const;
};

// Everything a HiPTune run owns.
struct HiptuneModel {
  HiptuneModel(const AttackTaxonomy& taxonomy, const ModelConfig& config, std::uint64_t seed);

  AttackTaxonomy taxonomy;
  ModelConfig config;
  DualEncoder encoder;
  PromptTree tree;
  GateParams gates;
  DpiParams dpi;

  ScoreResult score(ag::Tape& tape, const Image& image) const {
    return hiptune_score(tape, image, taxonomy, tree, gates, dpi, encoder);
  }
};

struct LossConfig {
  double margin = 0.3;
  double triplet_weight = 1.0;
  double routing_weight = 1.0;
  double lr_stage1 = 2e-3;
  double lr_stage2 = 5e-3;
  int batch_size = 32;
  int epochs_stage1 = 20;
  int epochs_stage2 = 40;
  bool joint_finetune = false;  // keep prompts trainable in stage 2
  void validate() const;
};

struct PretrainConfig {
  int epochs = 3;
  double lr = 1e-3;
  int batch_size = 32;
  void validate() const;
};

struct BaselineTrainConfig {
  int epochs = 20;
  double lr = 2e-3;
  int batch_size = 32;
  void validate() const;
};

struct LossRecord {
  long step = 0;
  int stage = 0;  // 0 pretraining, 1 and 2 the HiPTune stages
  std::string component;
  double value = 0.0;
  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

class LossTrace {
 public:
  void add(long step, int stage, const std::string& component, double value);
  const std::vector<LossRecord>& records() const { return records_; }
  // Values of one (stage, component) series in order.
  std::vector<double> series(int stage, const std::string& component) const;
  void append(const LossTrace& other);

  std::string to_jsonl() const;
  void save(const std::filesystem::path& path) const;
  friend bool operator==(const LossTrace&, const LossTrace&) = default;

 private:
  std::vector<LossRecord> records_;
};

// Stage bookkeeping shared across the HiPTune stages. Stages only advance
// 0 -> 1 -> 2.
struct TrainState {
  explicit TrainState(std::uint64_t seed_) : seed(seed_), rng(seed_) {}
  std::uint64_t seed;
  int stage = 0;
  long step = 0;
  std::mt19937_64 rng;
  LossTrace trace;
  // Advances the stage and reseeds the generator from (seed, stage), so a
  // stage resumed from a checkpoint replays identically.
  void enter(int next);
};

// Images and labels of the samples a trainer sees.
struct TrainingSet {
  std::vector<const Image*> images;
  std::vector<SampleLabel> labels;
  std::size_t size() const { return images.size(); }
};

TrainingSet make_training_set(const Dataset& dataset, const std::vector<std::size_t>& indices);

// Class id for the triplet losses: the live node for live samples, the
// level-3 node for fakes.
int triplet_class(const AttackTaxonomy& taxonomy, const SampleLabel& label);

// Briefly fits every encoder weight (and the template context) on the
// live/fake task through the fixed template, then freezes the encoder.
LossTrace pretrain_encoder(DualEncoder& encoder, const TrainingSet& data, const PretrainConfig& config,
                           std::uint64_t seed);

// Stage 1: prompt tree and DPI on supervised paths. CE on the live/fake
// probabilities plus the asymmetric triplet over prompt tokens (class =
// owning node). Throws InvariantViolation if the encoder is not frozen or
// its weights change.
void train_stage1(HiptuneModel& model, const TrainingSet& data, const LossConfig& config,
                  TrainState& state);

// Stage 2: gates and DPI with the prompts frozen. CE on the teacher-forced
// score, the triplet over image features and the per-level routing CE.
// Throws InvariantViolation if the encoder or (unless joint) the prompts
// change.
void train_stage2(HiptuneModel& model, const TrainingSet& data, const LossConfig& config,
                  TrainState& state);

// Flat learnable text context over the frozen encoder.
LossTrace train_coop(CoopBaseline& baseline, const DualEncoder& encoder, const TrainingSet& data,
                     const BaselineTrainConfig& config, std::uint64_t seed);

// Independent sub-seed for a named purpose (splitmix64 of seed and salt).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

// Pooled feature of an image without prompt tokens.
Matrix plain_feature(const DualEncoder& encoder, const Image& image);

}  // namespace hiptune
