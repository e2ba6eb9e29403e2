#pragma once

// Visual prompt tree: one learnable L_p x D prompt block per taxonomy node.

#include "hiptune/autograd.hpp"
#include "hiptune/encoders.hpp"
#include "hiptune/manifest.hpp"
#include "hiptune/taxonomy.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace hiptune {

class PromptTree {
 public:
  // Blocks are drawn i.i.d. from N(0, init_std^2).
  PromptTree(const AttackTaxonomy& taxonomy, int prompt_length, int dim, std::uint64_t seed,
             double init_std = 0.02);

  const Parameter& block(NodeId node) const;
  Parameter& block(NodeId node);
  std::size_t size() const { return blocks_.size(); }
  int prompt_length() const { return prompt_length_; }
  int dim() const { return dim_; }
  std::uint64_t taxonomy_fingerprint() const { return fingerprint_; }

  // Throws ConfigError if the taxonomy differs from the one the tree was
  // built for. Trees never gain or lose blocks after construction.
  void check_compatible(const AttackTaxonomy& taxonomy) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::uint64_t checksum() const { return hiptune::checksum(parameters()); }

 private:
  int prompt_length_;
  int dim_;
  std::uint64_t fingerprint_;
  std::vector<Parameter> blocks_;  // indexed by node id
};

struct PromptPath {
  struct Entry {
    int level;
    NodeId node;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  std::vector<Entry> entries;  // one entry (live) or three (fake chain)

  bool is_live_only() const { return entries.size() == 1; }
  std::vector<NodeId> nodes() const;
  friend bool operator==(const PromptPath&, const PromptPath&) = default;
};

PromptPath path_of(const AttackTaxonomy& taxonomy, const HierPath& chain);

// Fake sample -> its chain. Live sample with a fake partner -> the
// partner's chain; unpaired live -> the live node alone.
PromptPath select_supervised_path(const AttackTaxonomy& taxonomy, const SampleLabel& label,
                                  const std::optional<SampleLabel>& partner = std::nullopt);

std::vector<ag::Var> path_blocks(ag::Tape& tape, const PromptTree& tree, const PromptPath& path);

// Elementwise arithmetic mean of the selected blocks.
ag::Var integrate_prompts(const std::vector<ag::Var>& blocks);
Matrix integrate_prompts(const std::vector<Matrix>& blocks);

// [cls, image tokens, prompt tokens].
TokenSequence assemble_encoder_input(const TokenSequence& tokens, const ag::Var& prompt);

}  // namespace hiptune
