#include "hiptune/app.hpp"

#include "hiptune/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace hiptune {
namespace {

void check_grid(Index rows, int height, int width) {
  if (height < 1 || width < 1 || rows != static_cast<Index>(height) * width) {
    std::ostringstream os;
    os << "grid of " << rows << " rows is not " << height << "x" << width;
    throw ShapeError(os.str());
  }
}

void check_kernel(Index channels, const Matrix& kernel) {
  if (kernel.rows() != 9 * channels) {
    std::ostringstream os;
    os << "3x3 kernel expects " << 9 * channels << " rows for " << channels
       << " input channels, got " << kernel.rows();
    throw ShapeError(os.str());
  }
}

// Tap indices for every location, -1 where the tap falls outside.
std::vector<int> tap_index(int height, int width, const std::vector<int>& dilation) {
  std::vector<int> idx(static_cast<std::size_t>(height) * width * 9);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int p = y * width + x;
      const int d = dilation[static_cast<std::size_t>(p)];
      for (int k = 0; k < 9; ++k) {
        const int yy = y + d * (k / 3 - 1);
        const int xx = x + d * (k % 3 - 1);
        const bool inside = yy >= 0 && yy < height && xx >= 0 && xx < width;
        idx[static_cast<std::size_t>(p) * 9 + k] = inside ? yy * width + xx : -1;
      }
    }
  }
  return idx;
}

ag::Var dilated_conv(const ag::Var& x, int height, int width, const ag::Var& kernel,
                     const std::vector<int>& dilation) {
  check_grid(x.rows(), height, width);
  check_kernel(x.cols(), kernel.value());
  return ag::matmul(ag::gather_rows(x, tap_index(height, width, dilation), 9), kernel);
}

int grid_side(Index n_image) {
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_image))));
  if (side < 1 || static_cast<Index>(side) * side != n_image) {
    throw ShapeError("gate expects a square token grid, got " + std::to_string(n_image) + " tokens");
  }
  return side;
}

Matrix random_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// sum_n w_n: the nine C_in x C_out tap blocks added together.
ag::Var tap_sum(const ag::Var& kernel) {
  const Index c = kernel.rows() / 9;
  ag::Var sum = ag::slice_rows(kernel, 0, c);
  for (int k = 1; k < 9; ++k) sum = ag::add(sum, ag::slice_rows(kernel, k * c, c));
  return sum;
}

}  // namespace

ag::Var conv3x3(const ag::Var& x, int height, int width, const ag::Var& kernel, int dilation) {
  if (dilation < 1) throw ConfigError("dilation must be >= 1");
  return dilated_conv(x, height, width, kernel,
                      std::vector<int>(static_cast<std::size_t>(height) * width, dilation));
}

Matrix conv3x3(const Matrix& x, int height, int width, const Matrix& kernel, int dilation) {
  ag::Tape tape;
  return conv3x3(tape.constant(x), height, width, tape.constant(kernel), dilation).value();
}

ag::Var cdc_conv(const ag::Var& x, int height, int width, const ag::Var& kernel, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("CDC theta must lie in [0, 1]");
  ag::Var vanilla = conv3x3(x, height, width, kernel, 1);
  if (theta == 0.0) return vanilla;
  return ag::sub(vanilla, ag::scale(ag::matmul(x, tap_sum(kernel)), theta));
}

Matrix cdc_conv(const Matrix& x, int height, int width, const Matrix& kernel, double theta) {
  ag::Tape tape;
  return cdc_conv(tape.constant(x), height, width, tape.constant(kernel), theta).value();
}

std::vector<int> fadc_dilation_map(const Matrix& x, int height, int width) {
  check_grid(x.rows(), height, width);
  const std::size_t n = static_cast<std::size_t>(height) * width;
  std::vector<double> energy(n, 0.0);
  auto at = [&](int y, int xx) {
    y = std::clamp(y, 0, height - 1);
    xx = std::clamp(xx, 0, width - 1);
    return x.row(y * width + xx);
  };
  double peak = 0.0;
  for (int y = 0; y < height; ++y) {
    for (int xx = 0; xx < width; ++xx) {
      const auto lap = at(y - 1, xx) + at(y + 1, xx) + at(y, xx - 1) + at(y, xx + 1) - 4.0 * at(y, xx);
      const double e = lap.cwiseAbs().mean();
      energy[static_cast<std::size_t>(y * width + xx)] = e;
      peak = std::max(peak, e);
    }
  }
  std::vector<int> dilation(n, 1);
  if (peak <= 1e-12) return dilation;
  for (std::size_t p = 0; p < n; ++p) {
    const double r = energy[p] / peak;
    dilation[p] = r >= 0.5 ? 1 : r >= 0.25 ? 2 : 3;
  }
  return dilation;
}

FadcResult fadc_conv(const ag::Var& x, int height, int width, const ag::Var& kernel,
                     const FadcOptions& options) {
  check_grid(x.rows(), height, width);
  std::vector<int> dilation;
  if (options.forced_dilation) {
    if (*options.forced_dilation < 1 || *options.forced_dilation > 3) {
      throw ConfigError("forced FADC dilation must be 1, 2 or 3");
    }
    dilation.assign(static_cast<std::size_t>(height) * width, *options.forced_dilation);
  } else {
    dilation = fadc_dilation_map(x.value(), height, width);
  }
  ag::Var out = dilated_conv(x, height, width, kernel, dilation);
  return {out, std::move(dilation)};
}

Matrix fadc_conv(const Matrix& x, int height, int width, const Matrix& kernel,
                 const FadcOptions& options, std::vector<int>* dilation) {
  ag::Tape tape;
  FadcResult r = fadc_conv(tape.constant(x), height, width, tape.constant(kernel), options);
  if (dilation) *dilation = r.dilation;
  return r.output.value();
}

void GateConfig::validate() const {
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("CDC theta must lie in [0, 1]");
  if (!(init_std >= 0.0)) throw ConfigError("gate init_std must be >= 0");
  if (fadc.forced_dilation && (*fadc.forced_dilation < 1 || *fadc.forced_dilation > 3)) {
    throw ConfigError("forced FADC dilation must be 1, 2 or 3");
  }
}

GateParams::GateParams(const AttackTaxonomy& taxonomy, int dim, const GateConfig& config,
                       std::uint64_t seed)
    : dim_(dim), config_(config), fingerprint_(taxonomy.fingerprint()) {
  config.validate();
  if (dim < 1) throw ConfigError("gate dim must be >= 1");
  std::mt19937_64 rng(seed);
  const auto arity1 = static_cast<Index>(taxonomy.level1().size());
  w1 = {"gate.l1.w", random_matrix(dim, arity1, config.init_std, rng)};
  b1 = {"gate.l1.b", Matrix::Zero(1, arity1)};
  for (int level = 2; level <= 3; ++level) {
    for (NodeId branch : taxonomy.level_nodes(level - 1)) {
      const auto& node = taxonomy.node(branch);
      if (node.children.empty()) continue;  // live
      const NodeId top = level == 2 ? branch : *node.parent;
      ConvGate g;
      g.branch = branch;
      g.level = level;
      // Physical subtrees use CDC, digital ones FADC; level-3 gates inherit.
      g.kind = taxonomy.child_index(top) == 1 ? ConvKind::Cdc : ConvKind::Fadc;
      const std::string prefix = "gate.node" + std::to_string(branch);
      const auto arity = static_cast<Index>(node.children.size());
      g.kernel = {prefix + ".kernel", random_matrix(9 * dim, dim, config.init_std, rng)};
      g.head_w = {prefix + ".w", random_matrix(dim, arity, config.init_std, rng)};
      g.head_b = {prefix + ".b", Matrix::Zero(1, arity)};
      gates_.emplace(branch, std::move(g));
    }
  }
}

const ConvGate& GateParams::gate(NodeId branch) const {
  auto it = gates_.find(branch);
  if (it == gates_.end()) throw LabelError("no gate for branch node " + std::to_string(branch));
  return it->second;
}

ConvGate& GateParams::gate(NodeId branch) {
  return const_cast<ConvGate&>(static_cast<const GateParams&>(*this).gate(branch));
}

std::vector<Parameter*> GateParams::parameters() {
  std::vector<Parameter*> out{&w1, &b1};
  for (auto& [id, g] : gates_) {
    out.push_back(&g.kernel);
    out.push_back(&g.head_w);
    out.push_back(&g.head_b);
  }
  return out;
}

std::vector<const Parameter*> GateParams::parameters() const {
  std::vector<const Parameter*> out;
  for (Parameter* p : const_cast<GateParams*>(this)->parameters()) out.push_back(p);
  return out;
}

ag::Var gate_level1(ag::Tape& tape, const TokenSequence& tokens, const GateParams& params) {
  tokens.validate(params.dim());
  ag::Var x = ag::slice_rows(tokens.tokens, 0, tokens.n_cls + tokens.n_image);
  // Mean of per-token logits == head applied to the mean token.
  return ag::add(ag::matmul(ag::mean_rows(x), tape.param(params.w1)), tape.param(params.b1));
}

ag::Var gate_conv(ag::Tape& tape, int level, NodeId branch, const TokenSequence& tokens,
                  const ag::Var& condition, const GateParams& params) {
  tokens.validate(params.dim());
  const ConvGate& g = params.gate(branch);
  if (g.level != level) {
    throw ContractError("gate of node " + std::to_string(branch) + " scores level " +
                        std::to_string(g.level) + ", not " + std::to_string(level));
  }
  if (condition.rows() != 1 || condition.cols() != params.dim()) {
    throw ShapeError("gate condition must be 1 x " + std::to_string(params.dim()));
  }
  const int side = grid_side(tokens.n_image);
  ag::Var grid = tokens.image_tokens();
  ag::Var kernel = tape.param(g.kernel);
  const auto n = static_cast<std::size_t>(side) * side;
  // Pool the gathered taps before the kernel product; the convolution is
  // linear so this equals averaging the per-location outputs.
  std::vector<int> dilation;
  if (g.kind == ConvKind::Cdc) {
    dilation.assign(n, 1);
  } else if (params.config().fadc.forced_dilation) {
    dilation.assign(n, *params.config().fadc.forced_dilation);
  } else {
    dilation = fadc_dilation_map(grid.value(), side, side);
  }
  ag::Var taps = ag::mean_rows(ag::gather_rows(grid, tap_index(side, side, dilation), 9));
  ag::Var conv = ag::matmul(taps, kernel);
  if (g.kind == ConvKind::Cdc && params.theta() != 0.0) {
    conv = ag::sub(conv, ag::scale(ag::matmul(ag::mean_rows(grid), tap_sum(kernel)), params.theta()));
  }
  ag::Var pooled = ag::add(conv, condition);
  return ag::add(ag::matmul(pooled, tape.param(g.head_w)), tape.param(g.head_b));
}

int argmax_lowest(const Matrix& row) {
  if (row.size() == 0) throw ShapeError("argmax of an empty vector");
  int best = 0;
  for (Index i = 1; i < row.size(); ++i) {
    if (row.data()[i] > row.data()[best]) best = static_cast<int>(i);
  }
  return best;
}

PromptPath RoutingDecision::path() const {
  PromptPath p;
  for (std::size_t i = 0; i < nodes.size(); ++i) p.entries.push_back({static_cast<int>(i) + 1, nodes[i]});
  return p;
}

HierPath RoutingDecision::hier_path() const {
  if (stopped_at_live || nodes.size() != 3) throw ContractError("routing decision is not a fake path");
  return {nodes[0], nodes[1], nodes[2]};
}

RoutingDecision route_sample(ag::Tape& tape, const AttackTaxonomy& taxonomy,
                             const TokenSequence& tokens, const PromptTree& tree,
                             const GateParams& params, const std::optional<PromptPath>& forced) {
  tree.check_compatible(taxonomy);
  if (params.taxonomy_fingerprint() != taxonomy.fingerprint()) {
    throw ConfigError("gates were built for a different taxonomy");
  }
  if (forced && (forced->entries.empty() || forced->entries.size() > 3)) {
    throw ContractError("forced route must have 1 to 3 levels");
  }
  RoutingDecision d;
  d.teacher_forced = forced.has_value();

  auto take = [&](ag::Var logits, NodeId branch, const std::vector<NodeId>& candidates, int level) {
    ag::Var probs = ag::softmax_rows(logits);
    int idx;
    if (forced) {
      const NodeId want = forced->entries[static_cast<std::size_t>(level - 1)].node;
      auto it = std::find(candidates.begin(), candidates.end(), want);
      if (it == candidates.end()) throw LabelError("forced route leaves the taxonomy at level " + std::to_string(level));
      idx = static_cast<int>(it - candidates.begin());
    } else {
      idx = argmax_lowest(logits.value());
    }
    d.indices.push_back(idx);
    d.nodes.push_back(candidates[static_cast<std::size_t>(idx)]);
    d.branches.push_back(branch);
    d.logits.push_back(logits);
    d.probs.push_back(probs);
    d.distributions.push_back(probs.value());
    return candidates[static_cast<std::size_t>(idx)];
  };

  const NodeId n1 = take(gate_level1(tape, tokens, params), -1, taxonomy.level1(), 1);
  if (n1 == taxonomy.live()) {
    d.stopped_at_live = true;
    return d;
  }
  if (forced && forced->entries.size() < 3) throw ContractError("forced fake route needs 3 levels");

  ag::Var p1 = tape.param(tree.block(n1));
  const NodeId n2 = take(gate_conv(tape, 2, n1, tokens, ag::mean_rows(p1), params), n1,
                         taxonomy.children(n1), 2);
  ag::Var p12 = integrate_prompts({p1, tape.param(tree.block(n2))});
  take(gate_conv(tape, 3, n2, tokens, ag::mean_rows(p12), params), n2, taxonomy.children(n2), 3);
  return d;
}

}  // namespace hiptune
