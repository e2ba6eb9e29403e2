#include "hiptune/losses.hpp"

#include "hiptune/errors.hpp"

#include <set>

namespace hiptune {

ag::Var cross_entropy_loss(const ag::Var& probs, const std::vector<int>& labels, double floor) {
  if (probs.rows() != static_cast<Index>(labels.size()) || labels.empty()) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(probs.rows()) + " rows");
  }
  std::vector<ag::Var> picked;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= probs.cols()) {
      throw LabelError("cross_entropy_loss: label " + std::to_string(labels[i]) + " out of range");
    }
    picked.push_back(ag::element(probs, static_cast<Index>(i), labels[i]));
  }
  return ag::scale(ag::mean_all(ag::log_clamped(ag::concat_rows(picked), floor)), -1.0);
}

double cross_entropy_loss(const Matrix& probs, const std::vector<int>& labels, double floor) {
  ag::Tape tape;
  return cross_entropy_loss(tape.constant(probs), labels, floor).scalar();
}

TripletResult asymmetric_triplet_loss(const ag::Var& embeddings, const std::vector<int>& classes,
                                      double margin) {
  if (embeddings.rows() != static_cast<Index>(classes.size())) {
    throw ShapeError("asymmetric_triplet_loss: class count does not match embeddings");
  }
  if (!(margin >= 0.0)) throw ConfigError("triplet margin must be >= 0");
  ag::Tape& tape = embeddings.tape();
  TripletResult result;
  if (std::set<int>(classes.begin(), classes.end()).size() < 2) {
    result.single_class = true;
    result.loss = tape.constant(Matrix::Zero(1, 1));
    return result;
  }

  const Matrix& x = embeddings.value();
  const Index n = x.rows();
  Matrix dist(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) dist(i, j) = (x.row(i) - x.row(j)).squaredNorm();
  }
  struct Triple { Index a, p, n; };
  std::vector<Triple> active;
  double total = 0.0;
  std::size_t count = 0;
  for (Index a = 0; a < n; ++a) {
    for (Index p = 0; p < n; ++p) {
      if (p == a || classes[a] != classes[p]) continue;
      for (Index q = 0; q < n; ++q) {
        if (classes[q] == classes[a]) continue;
        ++count;
        const double h = margin + dist(a, p) - dist(a, q);
        if (h > 0.0) {
          total += h;
          active.push_back({a, p, q});
        }
      }
    }
  }
  result.triples = count;
  if (count == 0) {
    result.loss = tape.constant(Matrix::Zero(1, 1));
    return result;
  }
  Matrix value(1, 1);
  value(0, 0) = total / static_cast<double>(count);
  const std::size_t ix = embeddings.id();
  const double inv = 1.0 / static_cast<double>(count);
  result.loss = tape.record(std::move(value), {embeddings},
                            [ix, inv, active = std::move(active)](ag::Tape& t, std::size_t self) {
                              const Matrix& xv = t.value(ix);
                              const double g = t.grad(self)(0, 0) * inv;
                              Matrix gx = Matrix::Zero(xv.rows(), xv.cols());
                              for (const auto& tr : active) {
                                // d/dx of |a-p|^2 - |a-n|^2
                                gx.row(tr.a) += 2.0 * g * (xv.row(tr.n) - xv.row(tr.p));
                                gx.row(tr.p) += 2.0 * g * (xv.row(tr.p) - xv.row(tr.a));
                                gx.row(tr.n) += 2.0 * g * (xv.row(tr.a) - xv.row(tr.n));
                              }
                              t.accumulate(ix, gx);
                            });
  return result;
}

double asymmetric_triplet_loss(const Matrix& embeddings, const std::vector<int>& classes, double margin) {
  ag::Tape tape;
  return asymmetric_triplet_loss(tape.constant(embeddings), classes, margin).loss.scalar();
}

}  // namespace hiptune
