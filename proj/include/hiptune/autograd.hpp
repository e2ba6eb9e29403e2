#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records every operation of one forward pass; calling
// backward() on a 1x1 result propagates adjoints to every node that
// requires a gradient. Parameters are bound by reference, so building a
// graph never copies model weights.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hiptune {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// A named block of model weights.
struct Parameter {
  std::string name;
  Matrix value;
};

// FNV-1a over the raw bytes of the given parameters, in order.
std::uint64_t checksum(const std::vector<const Parameter*>& params);

using GradientMap = std::unordered_map<const Parameter*, Matrix>;

namespace ag {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the tape and the id of the node whose gradient is ready.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  // Binds a parameter by reference. Trainable parameters (see
  // set_trainable) get gradients; repeated binds return the same node.
  Var param(const Parameter& p);
  void set_trainable(const std::vector<Parameter*>& params);
  bool is_trainable(const Parameter& p) const;

  // Records an op result. requires_grad is inherited from the parents.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Matrix value, const std::vector<Var>& parents, BackwardFn backward);

  const Matrix& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Adds delta into the gradient of node id if it requires one.
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  // Gradient of node id; empty matrix when none reached it.
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  const Matrix& grad(const Var& v) const { return nodes_[v.id()].grad; }

  void backward(const Var& root);

  // Gradients of every bound trainable parameter, added into out.
  void collect_gradients(GradientMap& out) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix own;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  std::unordered_set<const Parameter*> trainable_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  std::vector<std::pair<const Parameter*, std::size_t>> bound_order_;
};

// ---- elementwise and linear algebra ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);

// a (n x c) + row (1 x c) broadcast over rows.
Var add_row(const Var& a, const Var& row);
// row (1 x c) repeated n times.
Var repeat_rows(const Var& row, Index n);
// a (n x c) with each row scaled by col(i) where col is n x 1.
Var scale_rows(const Var& a, const Var& col);

// ---- structure ----
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var element(const Var& a, Index r, Index c);
// Row-major reinterpretation with the same element count.
Var reshape(const Var& a, Index rows, Index cols);

// out.row(r) = concat over k of (idx[r][k] < 0 ? 0 : a.row(idx[r][k])).
// index has shape rows x taps, stored row-major.
Var gather_rows(const Var& a, const std::vector<int>& index, Index taps);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mean_rows(const Var& a);  // n x c -> 1 x c
Var sum_cols(const Var& a);   // n x c -> n x 1

// ---- nonlinearities ----
Var exp(const Var& a);
Var log(const Var& a);
Var log_clamped(const Var& a, double floor);  // zero gradient where clamped
Var relu(const Var& a);
Var gelu(const Var& a);  // tanh approximation
Var softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var normalize_rows(const Var& a);  // unit L2 norm per row

}  // namespace ag
}  // namespace hiptune
