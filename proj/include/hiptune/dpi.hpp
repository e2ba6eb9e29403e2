#pragma once

// Dynamic prompt integration: probability-weighted prompts within each
// routed level, self-attention across the level prompts, then a linear
// projection into the text encoder's input space.

#include "hiptune/app.hpp"
#include "hiptune/autograd.hpp"
#include "hiptune/encoders.hpp"
#include "hiptune/taxonomy.hpp"
#include "hiptune/vptree.hpp"

#include <cstdint>
#include <vector>

namespace hiptune {

class DpiParams {
 public:
  DpiParams(int dim, int text_dim, bool attention, std::uint64_t seed, double init_std = 0.02);

  Parameter wq;    // D x D
  Parameter wk;    // D x D
  Parameter proj;  // D x text_dim, no bias

  bool attention() const { return attention_; }
  void set_attention(bool on) { attention_ = on; }
  int dim() const { return static_cast<int>(proj.value.rows()); }
  int text_dim() const { return static_cast<int>(proj.value.cols()); }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::uint64_t checksum() const { return hiptune::checksum(parameters()); }

 private:
  bool attention_;
};

// sum_k probs_k * candidates_k. probs is 1 x K.
ag::Var weighted_level_prompt(const ag::Var& probs, const std::vector<ag::Var>& candidates);
Matrix weighted_level_prompt(const Matrix& probs, const std::vector<Matrix>& candidates);

// Level-1 logits over (live, physical, digital) -> fake weights over
// (physical, digital): the live score is dropped and the rest re-softmaxed.
ag::Var level1_fake_weights(const ag::Var& level1_logits);

// Weights and candidate nodes of one level.
struct LevelMixture {
  ag::Var weights;  // 1 x K
  std::vector<NodeId> candidates;
};

// Mixtures along a routing decision: level 1 uses the live-masked weights,
// deeper levels the sibling distributions of every routed level.
std::vector<LevelMixture> fake_mixtures(const AttackTaxonomy& taxonomy, const RoutingDecision& decision);

// One-hot mixtures along a labelled fake path (stage-1 supervision).
std::vector<LevelMixture> supervised_mixtures(ag::Tape& tape, const AttackTaxonomy& taxonomy,
                                              const HierPath& path);

struct TextPrompts {
  ag::Var live;  // L_p x text_dim
  ag::Var fake;  // L_p x text_dim
};

// Per-token attention across the stacked level prompts (value = identity),
// averaged over levels. Without attention this is the plain level mean.
ag::Var integrate_levels(ag::Tape& tape, const std::vector<ag::Var>& level_prompts,
                         const DpiParams& dpi);

TextPrompts build_text_prompts(ag::Tape& tape, const AttackTaxonomy& taxonomy,
                               const std::vector<LevelMixture>& mixtures, const PromptTree& tree,
                               const DpiParams& dpi);
TextPrompts build_text_prompts(ag::Tape& tape, const AttackTaxonomy& taxonomy,
                               const RoutingDecision& decision, const PromptTree& tree,
                               const DpiParams& dpi);

struct ScoreResult {
  ag::Var probs;    // 1 x 2 (live, fake)
  ag::Var feature;  // 1 x D image feature
  RoutingDecision decision;
  double p_live() const { return probs.value()(0, 0); }
  double p_fake() const { return probs.value()(0, 1); }
};

// Image prompt for a decision: the mean of its selected blocks.
ag::Var decision_prompt(ag::Tape& tape, const PromptTree& tree, const RoutingDecision& decision);

// Text side only: probabilities for a precomputed image feature.
ag::Var score_feature(ag::Tape& tape, const ag::Var& feature, const TextPrompts& prompts,
                      const DualEncoder& encoder);

ScoreResult hiptune_score(ag::Tape& tape, const Image& image, const AttackTaxonomy& taxonomy,
                          const PromptTree& tree, const GateParams& gates, const DpiParams& dpi,
                          const DualEncoder& encoder,
                          const std::optional<PromptPath>& forced = std::nullopt);

}  // namespace hiptune
