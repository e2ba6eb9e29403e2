#pragma once

#include "hiptune/autograd.hpp"

#include <cstddef>
#include <vector>

namespace hiptune {

// Mean of -log(max(p[i, label_i], floor)) over the batch. probs is N x K.
ag::Var cross_entropy_loss(const ag::Var& probs, const std::vector<int>& labels, double floor = 1e-12);
double cross_entropy_loss(const Matrix& probs, const std::vector<int>& labels, double floor = 1e-12);

struct TripletResult {
  ag::Var loss;
  bool single_class = false;  // fewer than two classes: loss is 0
  std::size_t triples = 0;
};

// Hinge triplet over every (anchor, positive, negative) with anchor and
// positive distinct samples of one class and the negative from another:
//   mean max(0, margin + |a - p|^2 - |a - n|^2).
// Callers encode the asymmetry in the class ids: every live sample shares
// one id while each fake category has its own.
TripletResult asymmetric_triplet_loss(const ag::Var& embeddings, const std::vector<int>& classes,
                                      double margin);
double asymmetric_triplet_loss(const Matrix& embeddings, const std::vector<int>& classes, double margin);

}  // namespace hiptune
