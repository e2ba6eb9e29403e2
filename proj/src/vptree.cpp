#include "hiptune/vptree.hpp"

#include "hiptune/errors.hpp"

#include <random>
#include <sstream>

namespace hiptune {

PromptTree::PromptTree(const AttackTaxonomy& taxonomy, int prompt_length, int dim,
                       std::uint64_t seed, double init_std)
    : prompt_length_(prompt_length), dim_(dim), fingerprint_(taxonomy.fingerprint()) {
  if (prompt_length < 1) throw ConfigError("prompt length must be >= 1");
  if (dim < 1) throw ConfigError("prompt dim must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, init_std);
  blocks_.reserve(taxonomy.node_count());
  for (const auto& node : taxonomy.nodes()) {
    Parameter p{"prompt.node" + std::to_string(node.id), Matrix(prompt_length, dim)};
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
    blocks_.push_back(std::move(p));
  }
}

const Parameter& PromptTree::block(NodeId node) const {
  if (node < 0 || node >= static_cast<NodeId>(blocks_.size())) {
    throw LabelError("no prompt block for node " + std::to_string(node));
  }
  return blocks_[static_cast<std::size_t>(node)];
}

Parameter& PromptTree::block(NodeId node) {
  return const_cast<Parameter&>(static_cast<const PromptTree&>(*this).block(node));
}

void PromptTree::check_compatible(const AttackTaxonomy& taxonomy) const {
  if (taxonomy.node_count() != blocks_.size() || taxonomy.fingerprint() != fingerprint_) {
    throw ConfigError("prompt tree was built for a different taxonomy");
  }
}

std::vector<Parameter*> PromptTree::parameters() {
  std::vector<Parameter*> out;
  for (auto& b : blocks_) out.push_back(&b);
  return out;
}

std::vector<const Parameter*> PromptTree::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& b : blocks_) out.push_back(&b);
  return out;
}

std::vector<NodeId> PromptPath::nodes() const {
  std::vector<NodeId> out;
  for (const auto& e : entries) out.push_back(e.node);
  return out;
}

PromptPath path_of(const AttackTaxonomy& taxonomy, const HierPath& chain) {
  if (!taxonomy.is_parent_chain(chain)) throw LabelError("attack path is not a parent chain");
  return PromptPath{{{1, chain.l1}, {2, chain.l2}, {3, chain.l3}}};
}

PromptPath select_supervised_path(const AttackTaxonomy& taxonomy, const SampleLabel& label,
                                  const std::optional<SampleLabel>& partner) {
  label.validate(taxonomy);
  if (!label.is_live) return path_of(taxonomy, *label.path);
  if (partner) {
    partner->validate(taxonomy);
    if (!partner->is_live) return path_of(taxonomy, *partner->path);
  }
  return PromptPath{{{1, taxonomy.live()}}};
}

std::vector<ag::Var> path_blocks(ag::Tape& tape, const PromptTree& tree, const PromptPath& path) {
  std::vector<ag::Var> out;
  for (const auto& e : path.entries) out.push_back(tape.param(tree.block(e.node)));
  return out;
}

ag::Var integrate_prompts(const std::vector<ag::Var>& blocks) {
  if (blocks.empty()) throw ShapeError("integrate_prompts: empty path");
  for (const auto& b : blocks) {
    if (b.rows() != blocks.front().rows() || b.cols() != blocks.front().cols()) {
      throw ShapeError("integrate_prompts: prompt blocks differ in shape");
    }
  }
  if (blocks.size() == 1) return blocks.front();
  ag::Var sum = blocks.front();
  for (std::size_t i = 1; i < blocks.size(); ++i) sum = ag::add(sum, blocks[i]);
  return ag::scale(sum, 1.0 / static_cast<double>(blocks.size()));
}

Matrix integrate_prompts(const std::vector<Matrix>& blocks) {
  ag::Tape tape;
  std::vector<ag::Var> vars;
  for (const auto& b : blocks) vars.push_back(tape.constant(b));
  return integrate_prompts(vars).value();
}

TokenSequence assemble_encoder_input(const TokenSequence& tokens, const ag::Var& prompt) {
  if (prompt.rows() < 1) throw ShapeError("assemble_encoder_input: empty prompt block");
  if (prompt.cols() != tokens.tokens.cols()) {
    std::ostringstream os;
    os << "assemble_encoder_input: prompt dim " << prompt.cols() << " != token dim "
       << tokens.tokens.cols();
    throw ShapeError(os.str());
  }
  TokenSequence out = tokens;
  out.tokens = ag::concat_rows({tokens.tokens, prompt});
  out.n_prompt = tokens.n_prompt + prompt.rows();
  return out;
}

}  // namespace hiptune
