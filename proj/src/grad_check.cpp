#include "hyperens/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace hyperens {

GradCheckReport grad_check(const std::function<Var(Tape&)>& graph, std::span<Parameter* const> params, double tolerance,
                           double step) {
  GradCheckReport report;
  report.tolerance = tolerance;
  for (Parameter* p : params) p->zero_grad();

  std::vector<const Parameter*> excluded;
  {
    Tape tape;
    Var out = graph(tape);
    excluded = tape.parameters_behind_nondifferentiable();
    tape.backward(out);
  }

  auto evaluate = [&]() {
    Tape tape;
    return graph(tape).value().item();
  };

  for (Parameter* p : params) {
    GradCheckEntry entry;
    entry.name = p->name;
    if (std::find(excluded.begin(), excluded.end(), p) != excluded.end()) {
      entry.checkable = false;
      report.entries.push_back(entry);
      continue;
    }
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      const double saved = p->value[j];
      p->value[j] = saved + step;
      const double up = evaluate();
      p->value[j] = saved - step;
      const double down = evaluate();
      p->value[j] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p->grad[j];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(analytic - numeric) / denom);
    }
    if (!(entry.max_rel_error < tolerance)) report.passed = false;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace hyperens
