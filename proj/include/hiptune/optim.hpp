#pragma once

#include "hiptune/autograd.hpp"

#include <unordered_map>
#include <vector>

namespace hiptune {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  void validate() const;
};

// Adam with bias correction and a constant learning rate. Parameters with
// no gradient in a step are left untouched.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, const AdamConfig& config);

  void step(const GradientMap& grads);
  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::unordered_map<const Parameter*, Moments> state_;
  long t_ = 0;
};

}  // namespace hiptune
