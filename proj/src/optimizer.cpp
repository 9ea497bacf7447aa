#include "hyperens/optimizer.hpp"

#include <cmath>

namespace hyperens {

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate >= 0.0)) throw std::invalid_argument("optimizer: learning rate must be >= 0");
  if (config_.momentum < 0.0 || config_.momentum >= 1.0) throw std::invalid_argument("optimizer: momentum must be in [0,1)");
  if (config_.beta1 < 0.0 || config_.beta1 >= 1.0 || config_.beta2 < 0.0 || config_.beta2 >= 1.0) {
    throw std::invalid_argument("optimizer: betas must be in [0,1)");
  }
}

void Optimizer::set_learning_rate(double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("optimizer: learning rate must be >= 0");
  config_.learning_rate = lr;
}

void Optimizer::step(std::span<Parameter* const> params) {
  for (const Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) throw GradientError("gradient shape mismatch for parameter " + p->name);
    if (!p->grad.all_finite()) throw GradientError("non-finite gradient for parameter " + p->name);
  }
  if (first_.empty()) {
    for (const Parameter* p : params) {
      first_.emplace_back(p->value.shape());
      if (config_.kind == OptimizerKind::adam) second_.emplace_back(p->value.shape());
    }
  } else if (first_.size() != params.size()) {
    throw std::invalid_argument("optimizer: parameter list changed between steps");
  }
  ++step_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::sgd_momentum) {
    const double mu = config_.momentum;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i]->value.data();
      const auto& g = params[i]->grad.data();
      auto& v = first_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu * v[j] + g[j];
        w[j] -= lr * (config_.nesterov ? g[j] + mu * v[j] : v[j]);
      }
    }
    return;
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->value.data();
    const auto& g = params[i]->grad.data();
    auto& m = first_[i].data();
    auto& v = second_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
    }
  }
}

}  // namespace hyperens
