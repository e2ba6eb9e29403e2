#pragma once

// Adaptive prompt pruning: per-level gates over the patch tokens and hard
// top-1 routing down the taxonomy.
//
// Spatial maps are stored as (H*W) x C matrices, row y*W + x. A 3x3 kernel
// is a (9*C_in) x C_out matrix whose k-th C_in-row block holds the tap at
// offset (k / 3 - 1, k % 3 - 1).

#include "hiptune/autograd.hpp"
#include "hiptune/encoders.hpp"
#include "hiptune/taxonomy.hpp"
#include "hiptune/vptree.hpp"

#include <map>
#include <optional>
#include <vector>

namespace hiptune {

// Plain 3x3 convolution with zero padding and a uniform dilation.
ag::Var conv3x3(const ag::Var& x, int height, int width, const ag::Var& kernel, int dilation = 1);
Matrix conv3x3(const Matrix& x, int height, int width, const Matrix& kernel, int dilation = 1);

// Central difference convolution:
//   y(p) = sum_n w_n x(p + n) - theta * x(p) * sum_n w_n
ag::Var cdc_conv(const ag::Var& x, int height, int width, const ag::Var& kernel, double theta);
Matrix cdc_conv(const Matrix& x, int height, int width, const Matrix& kernel, double theta);

// Per-location dilation in {1, 2, 3} picked from the local Laplacian energy
// (replicate padding): high-frequency locations keep dilation 1, smoother
// ones look further out. Constant input gives dilation 1 everywhere.
std::vector<int> fadc_dilation_map(const Matrix& x, int height, int width);

struct FadcOptions {
  std::optional<int> forced_dilation;  // bypass the selector
};

struct FadcResult {
  ag::Var output;
  std::vector<int> dilation;  // per location, row-major
};

FadcResult fadc_conv(const ag::Var& x, int height, int width, const ag::Var& kernel,
                     const FadcOptions& options = {});
Matrix fadc_conv(const Matrix& x, int height, int width, const Matrix& kernel,
                 const FadcOptions& options = {}, std::vector<int>* dilation = nullptr);

enum class ConvKind { Cdc, Fadc };

// Conv gate of one branch node: its children are the candidates.
struct ConvGate {
  NodeId branch = -1;
  int level = 2;  // level of the children being scored
  ConvKind kind = ConvKind::Cdc;
  Parameter kernel;  // 9D x D
  Parameter head_w;  // D x arity
  Parameter head_b;  // 1 x arity
  int arity() const { return static_cast<int>(head_w.value.cols()); }
};

struct GateConfig {
  double theta = 0.7;
  double init_std = 0.02;
  FadcOptions fadc;
  void validate() const;
};

class GateParams {
 public:
  GateParams(const AttackTaxonomy& taxonomy, int dim, const GateConfig& config, std::uint64_t seed);

  // Level-1 linear gate over {live, physical, digital}.
  Parameter w1;  // D x 3
  Parameter b1;  // 1 x 3

  const ConvGate& gate(NodeId branch) const;
  ConvGate& gate(NodeId branch);
  const std::map<NodeId, ConvGate>& gates() const { return gates_; }
  std::map<NodeId, ConvGate>& gates() { return gates_; }

  int dim() const { return dim_; }
  const GateConfig& config() const { return config_; }
  double theta() const { return config_.theta; }
  std::uint64_t taxonomy_fingerprint() const { return fingerprint_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::uint64_t checksum() const { return hiptune::checksum(parameters()); }

 private:
  int dim_;
  GateConfig config_;
  std::uint64_t fingerprint_;
  std::map<NodeId, ConvGate> gates_;  // keyed by branch node
};

// Level-1 logits (1 x 3): linear map of every cls + image token, averaged.
ag::Var gate_level1(ag::Tape& tape, const TokenSequence& tokens, const GateParams& params);

// Logits over the children of `branch` (a level-(level-1) node). The conv
// output is biased channel-wise by `condition` (1 x D, the mean of the
// selected prompt tokens so far) before the linear head; the per-location
// logits are averaged, which equals applying the head to the mean map.
ag::Var gate_conv(ag::Tape& tape, int level, NodeId branch, const TokenSequence& tokens,
                  const ag::Var& condition, const GateParams& params);

struct RoutingDecision {
  std::vector<int> indices;       // child index per routed level
  std::vector<NodeId> nodes;      // selected node per routed level
  std::vector<NodeId> branches;   // parent whose children were scored (-1 at level 1)
  std::vector<ag::Var> logits;    // 1 x arity per routed level
  std::vector<ag::Var> probs;     // softmax of logits
  std::vector<Matrix> distributions;
  bool stopped_at_live = false;
  bool teacher_forced = false;

  int levels() const { return static_cast<int>(nodes.size()); }
  PromptPath path() const;
  // Requires a full fake route.
  HierPath hier_path() const;
};

// Index of the largest entry; ties go to the lowest index.
int argmax_lowest(const Matrix& row);

// Routes through the gates. With `forced`, the given path is followed
// instead of the argmax (teacher forcing); logits are still computed at
// every level along it.
RoutingDecision route_sample(ag::Tape& tape, const AttackTaxonomy& taxonomy,
                             const TokenSequence& tokens, const PromptTree& tree,
                             const GateParams& params,
                             const std::optional<PromptPath>& forced = std::nullopt);

}  // namespace hiptune
