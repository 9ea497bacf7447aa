#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hyperens/tape.hpp"

namespace hyperens {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool checkable = true;  // false when the parameter feeds a non-differentiable node
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool passed = true;
};

/// Compares backward() against central differences for every entry of every
/// parameter. `graph` must build a scalar on the tape it is given and must be
/// deterministic (rebuilt once per perturbation). Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
GradCheckReport grad_check(const std::function<Var(Tape&)>& graph, std::span<Parameter* const> params, double tolerance,
                           double step = 1e-5);

}  // namespace hyperens
