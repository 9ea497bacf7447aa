#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyperens/tensor.hpp"

namespace hyperens {

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // sgd_momentum
  bool nesterov = false;
  double beta1 = 0.9;  // adam
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class GradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// First-order update rule with per-parameter moment buffers. Buffers are
/// bound to parameter positions on the first step.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  /// Applies one update using each parameter's grad. Throws GradientError
  /// naming the first parameter with a non-finite gradient; nothing is
  /// updated in that case.
  void step(std::span<Parameter* const> params);

  const OptimizerConfig& config() const { return config_; }
  std::size_t steps() const { return step_; }
  void set_learning_rate(double lr);

 private:
  OptimizerConfig config_;
  std::size_t step_ = 0;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
};

}  // namespace hyperens
