#include "hiptune/optim.hpp"

#include "hiptune/errors.hpp"

#include <cmath>

namespace hiptune {

void AdamConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("Adam eps must be > 0");
}

Adam::Adam(std::vector<Parameter*> params, const AdamConfig& config)
    : params_(std::move(params)), config_(config) {
  config.validate();
}

void Adam::step(const GradientMap& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (Parameter* p : params_) {
    auto it = grads.find(p);
    if (it == grads.end()) continue;
    const Matrix& g = it->second;
    if (g.rows() != p->value.rows() || g.cols() != p->value.cols()) {
      throw ShapeError("gradient shape mismatch for " + p->name);
    }
    Moments& s = state_[p];
    if (s.m.size() == 0) {
      s.m = Matrix::Zero(g.rows(), g.cols());
      s.v = Matrix::Zero(g.rows(), g.cols());
    }
    s.m = config_.beta1 * s.m + (1.0 - config_.beta1) * g;
    s.v = config_.beta2 * s.v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    if (config_.lr == 0.0) continue;
    p->value.array() -= config_.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + config_.eps);
  }
}

}  // namespace hiptune
