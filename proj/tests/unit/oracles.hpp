#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the library code it checks.

#include "hiptune/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using hiptune::Matrix;

inline Matrix random_matrix(std::mt19937_64& rng, int rows, int cols, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = n(rng);
  }
  return m;
}

// 3x3 convolution with per-location dilation and zero padding, written as
// plain loops over output pixel, tap, input and output channel. Maps are
// (H*W) x C, kernels (9*C_in) x C_out with tap k at (k/3 - 1, k%3 - 1).
inline Matrix conv_loops(const Matrix& x, int h, int w, const Matrix& kernel, const std::vector<int>& dilation,
                         double theta = 0.0) {
  const int cin = static_cast<int>(x.cols());
  const int cout = static_cast<int>(kernel.cols());
  Matrix y = Matrix::Zero(h * w, cout);
  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      const int p = py * w + px;
      const int d = dilation[static_cast<std::size_t>(p)];
      for (int o = 0; o < cout; ++o) {
        double acc = 0.0;
        for (int k = 0; k < 9; ++k) {
          const int qy = py + d * (k / 3 - 1);
          const int qx = px + d * (k % 3 - 1);
          for (int c = 0; c < cin; ++c) {
            const double wk = kernel(k * cin + c, o);
            if (qy >= 0 && qy < h && qx >= 0 && qx < w) acc += wk * x(qy * w + qx, c);
            acc -= theta * wk * x(p, c);
          }
        }
        y(p, o) = acc;
      }
    }
  }
  return y;
}

inline Matrix conv_loops(const Matrix& x, int h, int w, const Matrix& kernel, int dilation = 1,
                         double theta = 0.0) {
  return conv_loops(x, h, w, kernel, std::vector<int>(static_cast<std::size_t>(h * w), dilation), theta);
}

// AUC as the fraction of (live, fake) pairs where the live score is higher,
// ties counted one half.
inline double auc_pairs(const std::vector<double>& live, const std::vector<double>& fake) {
  double wins = 0.0;
  for (double a : live) {
    for (double b : fake) wins += a > b ? 1.0 : a == b ? 0.5 : 0.0;
  }
  return wins / (static_cast<double>(live.size()) * static_cast<double>(fake.size()));
}

// EER by sweeping every candidate threshold and counting directly: accept
// as live when score >= t. Candidates are every observed score plus one
// above the maximum. Returns the interpolated crossing of FAR and FRR.
inline double eer_sweep(const std::vector<double>& live, const std::vector<double>& fake) {
  std::vector<double> cand = live;
  cand.insert(cand.end(), fake.begin(), fake.end());
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  cand.push_back(std::nextafter(cand.back(), 1e300));
  double prev_far = 0.0, prev_frr = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    double far = 0.0, frr = 0.0;
    for (double s : fake) far += s >= cand[i] ? 1.0 : 0.0;
    for (double s : live) frr += s < cand[i] ? 1.0 : 0.0;
    far /= static_cast<double>(fake.size());
    frr /= static_cast<double>(live.size());
    if (far == frr) return far;
    if (far < frr) {
      if (i == 0) return far;
      // Solve prev + a * (cur - prev) on both curves for equality.
      const double a = (prev_far - prev_frr) / ((prev_far - prev_frr) - (far - frr));
      return prev_far + a * (far - prev_far);
    }
    prev_far = far;
    prev_frr = frr;
  }
  return prev_far;
}

// Mean hinge over every valid triple, squared Euclidean distances.
inline double triplet_exhaustive(const Matrix& e, const std::vector<int>& cls, double margin, long* count = nullptr) {
  double sum = 0.0;
  long n = 0;
  const auto rows = static_cast<std::size_t>(e.rows());
  for (std::size_t a = 0; a < rows; ++a) {
    for (std::size_t p = 0; p < rows; ++p) {
      if (p == a || cls[p] != cls[a]) continue;
      for (std::size_t q = 0; q < rows; ++q) {
        if (cls[q] == cls[a]) continue;
        double dap = 0.0, daq = 0.0;
        for (long c = 0; c < e.cols(); ++c) {
          dap += (e(a, c) - e(p, c)) * (e(a, c) - e(p, c));
          daq += (e(a, c) - e(q, c)) * (e(a, c) - e(q, c));
        }
        sum += std::max(0.0, margin + dap - daq);
        ++n;
      }
    }
  }
  if (count) *count = n;
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

// Relative error with a small absolute floor so exact zeros compare sanely.
inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Central finite difference of f with respect to entry (r, c) of m.
inline double central_difference(Matrix& m, int r, int c, const std::function<double()>& f, double h = 1e-5) {
  const double keep = m(r, c);
  m(r, c) = keep + h;
  const double up = f();
  m(r, c) = keep - h;
  const double down = f();
  m(r, c) = keep;
  return (up - down) / (2.0 * h);
}

}  // namespace oracle
