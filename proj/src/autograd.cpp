#include "hiptune/autograd.hpp"

#include "hiptune/errors.hpp"

#include <cmath>
#include <sstream>

namespace hiptune {

std::uint64_t checksum(const std::vector<const Parameter*>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const Parameter* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    const std::size_t n = static_cast<std::size_t>(p->value.size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

namespace ag {

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    std::ostringstream os;
    os << "scalar() on a " << v.rows() << "x" << v.cols() << " value";
    throw ShapeError(os.str());
  }
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::set_trainable(const std::vector<Parameter*>& params) {
  for (const Parameter* p : params) trainable_.insert(p);
}

bool Tape::is_trainable(const Parameter& p) const { return trainable_.count(&p) != 0; }

Var Tape::param(const Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  Node n;
  n.external = &p.value;
  n.requires_grad = is_trainable(p);
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  bound_.emplace(&p, id);
  bound_order_.emplace_back(&p, id);
  return Var(this, id);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
  Node n;
  n.own = std::move(value);
  for (const Var& v : parents) n.requires_grad = n.requires_grad || v.requires_grad();
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, BackwardFn backward) {
  Node n;
  n.own = std::move(value);
  for (const Var& v : parents) n.requires_grad = n.requires_grad || v.requires_grad();
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.own;
}

void Tape::backward(const Var& root) {
  if (root.tape_ != this) throw ContractError("backward() on a Var from another tape");
  const Matrix& v = value(root.id());
  if (v.size() != 1) throw ShapeError("backward() requires a 1x1 root");
  if (!nodes_[root.id()].requires_grad) return;
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, i);
  }
}

void Tape::collect_gradients(GradientMap& out) const {
  for (const auto& [p, id] : bound_order_) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    auto it = out.find(p);
    if (it == out.end()) {
      out.emplace(p, n.grad);
    } else {
      it->second += n.grad;
    }
  }
}

namespace {

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream os;
    os << op << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
       << b.cols();
    throw ShapeError(os.str());
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b},
                         [ia, ib](Tape& t, std::size_t self) {
                           const Matrix& g = t.grad(self);
                           if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                           if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                         });
}

Var scale(const Var& a, double s) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value() * s, {a},
                         [ia, s](Tape& t, std::size_t self) { t.accumulate(ia, t.grad(self) * s); });
}

Var add_scalar(const Var& a, double s) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array() + s;
  return a.tape().record(std::move(out), {a},
                         [ia](Tape& t, std::size_t self) { t.accumulate(ia, t.grad(self)); });
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    std::ostringstream os;
    os << "matmul: " << a.rows() << "x" << a.cols() << " * " << b.rows() << "x" << b.cols();
    throw ShapeError(os.str());
  }
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.cols() != b.cols()) {
    std::ostringstream os;
    os << "matmul_nt: " << a.rows() << "x" << a.cols() << " * (" << b.rows() << "x" << b.cols()
       << ")^T";
    throw ShapeError(os.str());
  }
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value().transpose();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var transpose(const Var& a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().transpose();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

Var add_row(const Var& a, const Var& row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    std::ostringstream os;
    os << "add_row: " << a.rows() << "x" << a.cols() << " + " << row.rows() << "x" << row.cols();
    throw ShapeError(os.str());
  }
  const std::size_t ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape().record(std::move(out), {a, row}, [ia, ir](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var repeat_rows(const Var& row, Index n) {
  if (row.rows() != 1) throw ShapeError("repeat_rows expects a single row");
  const std::size_t ir = row.id();
  Matrix out = row.value().replicate(n, 1);
  return row.tape().record(std::move(out), {row}, [ir](Tape& t, std::size_t self) {
    t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

Var scale_rows(const Var& a, const Var& col) {
  require_same_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("scale_rows: column mismatch");
  const std::size_t ia = a.id(), ic = col.id();
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return a.tape().record(std::move(out), {a, col}, [ia, ic](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Matrix ga = g.array().colwise() * t.value(ic).col(0).array();
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ic)) {
      Matrix gc = g.cwiseProduct(t.value(ia)).rowwise().sum();
      t.accumulate(ic, gc);
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index r = 0;
  std::vector<std::pair<std::size_t, Index>> spans;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    r += p.rows();
  }
  return parts.front().tape().record(std::move(out), parts,
                                     [spans](Tape& t, std::size_t self) {
                                       const Matrix& g = t.grad(self);
                                       Index r0 = 0;
                                       for (const auto& [id, n] : spans) {
                                         if (t.requires_grad(id)) t.accumulate(id, g.middleRows(r0, n));
                                         r0 += n;
                                       }
                                     });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index c = 0;
  std::vector<std::pair<std::size_t, Index>> spans;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    c += p.cols();
  }
  return parts.front().tape().record(std::move(out), parts,
                                     [spans](Tape& t, std::size_t self) {
                                       const Matrix& g = t.grad(self);
                                       Index c0 = 0;
                                       for (const auto& [id, n] : spans) {
                                         if (t.requires_grad(id)) t.accumulate(id, g.middleCols(c0, n));
                                         c0 += n;
                                       }
                                     });
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows out of range");
  const std::size_t ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  Matrix out = a.value().middleRows(start, count);
  return a.tape().record(std::move(out), {a}, [ia, start, count, rows, cols](Tape& t, std::size_t self) {
    Matrix g = Matrix::Zero(rows, cols);
    g.middleRows(start, count) = t.grad(self);
    t.accumulate(ia, g);
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  const std::size_t ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  Matrix out = a.value().middleCols(start, count);
  return a.tape().record(std::move(out), {a}, [ia, start, count, rows, cols](Tape& t, std::size_t self) {
    Matrix g = Matrix::Zero(rows, cols);
    g.middleCols(start, count) = t.grad(self);
    t.accumulate(ia, g);
  });
}

Var element(const Var& a, Index r, Index c) {
  if (r < 0 || c < 0 || r >= a.rows() || c >= a.cols()) throw ShapeError("element out of range");
  const std::size_t ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value()(r, c);
  return a.tape().record(std::move(out), {a}, [ia, r, c, rows, cols](Tape& t, std::size_t self) {
    Matrix g = Matrix::Zero(rows, cols);
    g(r, c) = t.grad(self)(0, 0);
    t.accumulate(ia, g);
  });
}

Var reshape(const Var& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count mismatch");
  const std::size_t ia = a.id();
  const Index r0 = a.rows(), c0 = a.cols();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return a.tape().record(std::move(out), {a}, [ia, r0, c0](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, Eigen::Map<const Matrix>(g.data(), r0, c0));
  });
}

Var gather_rows(const Var& a, const std::vector<int>& index, Index taps) {
  if (taps <= 0 || static_cast<Index>(index.size()) % taps != 0) {
    throw ShapeError("gather_rows: index size is not a multiple of taps");
  }
  const Index out_rows = static_cast<Index>(index.size()) / taps;
  const Index c = a.cols();
  const Index in_rows = a.rows();
  Matrix out = Matrix::Zero(out_rows, taps * c);
  const Matrix& x = a.value();
  for (Index r = 0; r < out_rows; ++r) {
    for (Index k = 0; k < taps; ++k) {
      const int src = index[static_cast<std::size_t>(r * taps + k)];
      if (src < 0) continue;
      if (src >= in_rows) throw ShapeError("gather_rows: index out of range");
      out.block(r, k * c, 1, c) = x.row(src);
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, index, taps, out_rows, c, in_rows](Tape& t, std::size_t self) {
                           const Matrix& g = t.grad(self);
                           Matrix ga = Matrix::Zero(in_rows, c);
                           for (Index r = 0; r < out_rows; ++r) {
                             for (Index k = 0; k < taps; ++k) {
                               const int src = index[static_cast<std::size_t>(r * taps + k)];
                               if (src >= 0) ga.row(src) += g.block(r, k * c, 1, c);
                             }
                           }
                           t.accumulate(ia, ga);
                         });
}

Var sum_all(const Var& a) {
  const std::size_t ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [ia, rows, cols](Tape& t, std::size_t self) {
    t.accumulate(ia, Matrix::Constant(rows, cols, t.grad(self)(0, 0)));
  });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

Var mean_rows(const Var& a) {
  const std::size_t ia = a.id();
  const Index rows = a.rows();
  Matrix out = a.value().colwise().mean();
  return a.tape().record(std::move(out), {a}, [ia, rows](Tape& t, std::size_t self) {
    Matrix g = t.grad(self).replicate(rows, 1) / static_cast<double>(rows);
    t.accumulate(ia, g);
  });
}

Var sum_cols(const Var& a) {
  const std::size_t ia = a.id();
  const Index cols = a.cols();
  Matrix out = a.value().rowwise().sum();
  return a.tape().record(std::move(out), {a}, [ia, cols](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).replicate(1, cols));
  });
}

Var exp(const Var& a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().exp();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

Var log(const Var& a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().log();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).cwiseQuotient(t.value(ia)));
  });
}

Var log_clamped(const Var& a, double floor) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().max(floor).log();
  return a.tape().record(std::move(out), {a}, [ia, floor](Tape& t, std::size_t self) {
    const Matrix& x = t.value(ia);
    Matrix g = t.grad(self);
    for (Index i = 0; i < g.size(); ++i) {
      g.data()[i] = x.data()[i] > floor ? g.data()[i] / x.data()[i] : 0.0;
    }
    t.accumulate(ia, g);
  });
}

Var relu(const Var& a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    Matrix g = (t.value(ia).array() > 0.0).select(t.grad(self), 0.0);
    t.accumulate(ia, g);
  });
}

Var gelu(const Var& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const std::size_t ia = a.id();
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& x = t.value(ia);
    Matrix g = t.grad(self);
    for (Index i = 0; i < g.size(); ++i) {
      const double v = x.data()[i];
      const double u = kC * (v + kA * v * v * v);
      const double th = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * v * v);
      g.data()[i] *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
    }
    t.accumulate(ia, g);
  });
}

Var softmax_rows(const Var& a) {
  const std::size_t ia = a.id();
  Matrix out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix dot = g.cwiseProduct(y).rowwise().sum();
    Matrix gx = y.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(ia, gx);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Index n = x.rows(), d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw ShapeError("layer_norm: gamma/beta must be 1 x dim");
  }
  Matrix xhat(n, d);
  Matrix inv_std(n, 1);
  const Matrix& xv = x.value();
  for (Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r, 0) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r, 0);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [ix, ig, ib, xhat, inv_std, d](Tape& t, std::size_t self) {
                           const Matrix& g = t.grad(self);
                           if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                           if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                           if (!t.requires_grad(ix)) return;
                           Matrix gh = g.array().rowwise() * t.value(ig).row(0).array();
                           Matrix gx(gh.rows(), d);
                           for (Index r = 0; r < gh.rows(); ++r) {
                             const double m1 = gh.row(r).mean();
                             const double m2 = gh.row(r).cwiseProduct(xhat.row(r)).mean();
                             gx.row(r) = inv_std(r, 0) *
                                         (gh.row(r).array() - m1 - xhat.row(r).array() * m2);
                           }
                           t.accumulate(ix, gx);
                         });
}

Var normalize_rows(const Var& a) {
  const Matrix& v = a.value();
  Matrix norms = v.rowwise().norm();
  for (Index r = 0; r < norms.rows(); ++r) {
    if (!(norms(r, 0) > 0.0)) throw NumericalDomainError("normalize_rows: zero-norm row");
  }
  Matrix out = v.array().colwise() / norms.col(0).array();
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, norms](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix dot = g.cwiseProduct(y).rowwise().sum();
    Matrix gx = (g.array() - y.array().colwise() * dot.col(0).array()).matrix();
    gx = gx.array().colwise() / norms.col(0).array();
    t.accumulate(ia, gx);
  });
}

}  // namespace ag
}  // namespace hiptune
