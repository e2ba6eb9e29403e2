#include "hiptune/dpi.hpp"

#include "hiptune/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace hiptune {

DpiParams::DpiParams(int dim, int text_dim, bool attention, std::uint64_t seed, double init_std)
    : attention_(attention) {
  if (dim < 1 || text_dim < 1) throw ConfigError("DPI dims must be >= 1");
  std::mt19937_64 rng(seed);
  auto init = [&](Index r, Index c, double sd) {
    std::normal_distribution<double> n(0.0, sd);
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
  };
  wq = {"dpi.wq", init(dim, dim, init_std)};
  wk = {"dpi.wk", init(dim, dim, init_std)};
  // Scaled so that projected contexts start near unit token scale.
  proj = {"dpi.proj", init(dim, text_dim, 1.0 / std::sqrt(static_cast<double>(dim)))};
}

std::vector<Parameter*> DpiParams::parameters() { return {&wq, &wk, &proj}; }
std::vector<const Parameter*> DpiParams::parameters() const { return {&wq, &wk, &proj}; }

ag::Var weighted_level_prompt(const ag::Var& probs, const std::vector<ag::Var>& candidates) {
  if (candidates.empty()) throw ShapeError("weighted_level_prompt: no candidates");
  if (probs.rows() != 1 || probs.cols() != static_cast<Index>(candidates.size())) {
    std::ostringstream os;
    os << "weighted_level_prompt: " << probs.cols() << " weights for " << candidates.size()
       << " candidates";
    throw ShapeError(os.str());
  }
  const Index rows = candidates.front().rows(), cols = candidates.front().cols();
  std::vector<ag::Var> flat;
  for (const auto& c : candidates) {
    if (c.rows() != rows || c.cols() != cols) throw ShapeError("weighted_level_prompt: candidate shapes differ");
    flat.push_back(ag::reshape(c, 1, rows * cols));
  }
  return ag::reshape(ag::matmul(probs, ag::concat_rows(flat)), rows, cols);
}

Matrix weighted_level_prompt(const Matrix& probs, const std::vector<Matrix>& candidates) {
  ag::Tape tape;
  std::vector<ag::Var> vars;
  for (const auto& c : candidates) vars.push_back(tape.constant(c));
  return weighted_level_prompt(tape.constant(probs), vars).value();
}

ag::Var level1_fake_weights(const ag::Var& level1_logits) {
  if (level1_logits.rows() != 1 || level1_logits.cols() < 2) {
    throw ShapeError("level-1 logits must be 1 x (1 + fake branches)");
  }
  return ag::softmax_rows(ag::slice_cols(level1_logits, 1, level1_logits.cols() - 1));
}

std::vector<LevelMixture> fake_mixtures(const AttackTaxonomy& taxonomy, const RoutingDecision& decision) {
  if (decision.logits.empty() || decision.probs.size() != decision.logits.size() ||
      decision.branches.size() != decision.logits.size()) {
    throw ContractError("routing decision carries no distributions");
  }
  const auto& l1 = taxonomy.level1();
  std::vector<LevelMixture> out;
  out.push_back({level1_fake_weights(decision.logits[0]), std::vector<NodeId>(l1.begin() + 1, l1.end())});
  for (std::size_t i = 1; i < decision.probs.size(); ++i) {
    out.push_back({decision.probs[i], taxonomy.children(decision.branches[i])});
  }
  return out;
}

std::vector<LevelMixture> supervised_mixtures(ag::Tape& tape, const AttackTaxonomy& taxonomy,
                                              const HierPath& path) {
  if (!taxonomy.is_parent_chain(path)) throw LabelError("supervised path is not a parent chain");
  const auto& l1 = taxonomy.level1();
  std::vector<std::vector<NodeId>> candidates{std::vector<NodeId>(l1.begin() + 1, l1.end()),
                                              taxonomy.children(path.l1), taxonomy.children(path.l2)};
  std::vector<LevelMixture> out;
  for (int level = 1; level <= 3; ++level) {
    const auto& cand = candidates[static_cast<std::size_t>(level - 1)];
    Matrix w = Matrix::Zero(1, static_cast<Index>(cand.size()));
    const auto it = std::find(cand.begin(), cand.end(), path.at(level));
    w(0, it - cand.begin()) = 1.0;
    out.push_back({tape.constant(std::move(w)), cand});
  }
  return out;
}

ag::Var integrate_levels(ag::Tape& tape, const std::vector<ag::Var>& level_prompts,
                         const DpiParams& dpi) {
  if (level_prompts.empty()) throw ContractError("no level prompts to integrate");
  const Index rows = level_prompts.front().rows();
  if (!dpi.attention() || level_prompts.size() == 1) {
    ag::Var sum = level_prompts.front();
    for (std::size_t i = 1; i < level_prompts.size(); ++i) sum = ag::add(sum, level_prompts[i]);
    return ag::scale(sum, 1.0 / static_cast<double>(level_prompts.size()));
  }
  ag::Var wq = tape.param(dpi.wq);
  ag::Var wk = tape.param(dpi.wk);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dpi.dim()));
  std::vector<ag::Var> tokens;
  for (Index t = 0; t < rows; ++t) {
    std::vector<ag::Var> stack;
    for (const auto& p : level_prompts) stack.push_back(ag::slice_rows(p, t, 1));
    ag::Var x = ag::concat_rows(stack);  // levels x D
    ag::Var a = ag::softmax_rows(ag::scale(ag::matmul_nt(ag::matmul(x, wq), ag::matmul(x, wk)), inv_sqrt_d));
    tokens.push_back(ag::mean_rows(ag::matmul(a, x)));
  }
  return ag::concat_rows(tokens);
}

TextPrompts build_text_prompts(ag::Tape& tape, const AttackTaxonomy& taxonomy,
                               const std::vector<LevelMixture>& mixtures, const PromptTree& tree,
                               const DpiParams& dpi) {
  if (mixtures.empty()) throw ContractError("build_text_prompts: no level mixtures");
  if (dpi.dim() != tree.dim()) throw ShapeError("DPI dim does not match the prompt tree");
  std::vector<ag::Var> level_prompts;
  for (const auto& m : mixtures) {
    std::vector<ag::Var> blocks;
    for (NodeId n : m.candidates) blocks.push_back(tape.param(tree.block(n)));
    level_prompts.push_back(weighted_level_prompt(m.weights, blocks));
  }
  ag::Var proj = tape.param(dpi.proj);
  return {ag::matmul(tape.param(tree.block(taxonomy.live())), proj),
          ag::matmul(integrate_levels(tape, level_prompts, dpi), proj)};
}

TextPrompts build_text_prompts(ag::Tape& tape, const AttackTaxonomy& taxonomy,
                               const RoutingDecision& decision, const PromptTree& tree,
                               const DpiParams& dpi) {
  return build_text_prompts(tape, taxonomy, fake_mixtures(taxonomy, decision), tree, dpi);
}

ag::Var decision_prompt(ag::Tape& tape, const PromptTree& tree, const RoutingDecision& decision) {
  if (decision.nodes.empty()) throw ContractError("empty routing decision");
  return integrate_prompts(path_blocks(tape, tree, decision.path()));
}

ag::Var score_feature(ag::Tape& tape, const ag::Var& feature, const TextPrompts& prompts,
                      const DualEncoder& encoder) {
  ag::Var weights = ag::concat_rows({encoder.encode_text(tape, prompts.live, ClassTag::Live),
                                     encoder.encode_text(tape, prompts.fake, ClassTag::Fake)});
  return class_probabilities(feature, weights, encoder.config().temperature);
}

ScoreResult hiptune_score(ag::Tape& tape, const Image& image, const AttackTaxonomy& taxonomy,
                          const PromptTree& tree, const GateParams& gates, const DpiParams& dpi,
                          const DualEncoder& encoder, const std::optional<PromptPath>& forced) {
  TokenSequence tokens = encoder.patch_embed(tape, image);
  RoutingDecision decision = route_sample(tape, taxonomy, tokens, tree, gates, forced);
  ag::Var feature = encoder.encode_image(tape, assemble_encoder_input(tokens, decision_prompt(tape, tree, decision)));
  TextPrompts prompts = build_text_prompts(tape, taxonomy, decision, tree, dpi);
  ag::Var probs = score_feature(tape, feature, prompts, encoder);
  return {probs, feature, std::move(decision)};
}

}  // namespace hiptune
