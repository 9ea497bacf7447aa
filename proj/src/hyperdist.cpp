#include "hyperens/hyperdist.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "hyperens/ops.hpp"

namespace hyperens {

const char* to_string(HyperKind kind) {
  switch (kind) {
    case HyperKind::l2: return "l2";
    case HyperKind::dropout: return "dropout";
    case HyperKind::label_smoothing: return "label_smoothing";
  }
  return "?";
}

const char* to_string(L2Part part) {
  switch (part) {
    case L2Part::weights: return "weights";
    case L2Part::bias: return "bias";
    case L2Part::both: return "both";
  }
  return "?";
}

HyperKind parse_hyper_kind(const std::string& s) {
  if (s == "l2") return HyperKind::l2;
  if (s == "dropout") return HyperKind::dropout;
  if (s == "label_smoothing") return HyperKind::label_smoothing;
  throw SchemaError("unknown hyperparameter kind '" + s + "'");
}

L2Part parse_l2_part(const std::string& s) {
  if (s == "weights") return L2Part::weights;
  if (s == "bias") return L2Part::bias;
  if (s == "both") return L2Part::both;
  throw SchemaError("unknown l2 part '" + s + "'");
}

HyperSchema::HyperSchema(std::vector<HyperDim> dims) : dims_(std::move(dims)) {
  std::set<std::string> seen;
  for (const auto& d : dims_) {
    if (d.name.empty()) throw SchemaError("hyperparameter with empty name");
    if (!seen.insert(d.name).second) throw SchemaError("duplicate hyperparameter '" + d.name + "'");
    if (!(d.lower > 0.0) || !(d.upper > d.lower) || !std::isfinite(d.upper))
      throw SchemaError("hyperparameter '" + d.name + "': need 0 < lower < upper");
    if (d.kind == HyperKind::dropout && d.upper > 0.95)
      throw SchemaError("hyperparameter '" + d.name + "': dropout rate above 0.95");
    if (d.kind == HyperKind::label_smoothing && d.upper > 0.3)
      throw SchemaError("hyperparameter '" + d.name + "': label smoothing above 0.3");
    if (d.layer < -1) throw SchemaError("hyperparameter '" + d.name + "': bad layer index");
  }
}

std::optional<std::size_t> HyperSchema::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < dims_.size(); ++i)
    if (dims_[i].name == name) return i;
  return std::nullopt;
}

std::optional<std::size_t> HyperSchema::l2_index(int layer, L2Part part) const {
  std::optional<std::size_t> global;
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    const auto& d = dims_[i];
    if (d.kind != HyperKind::l2) continue;
    if (d.part != L2Part::both && d.part != part) continue;
    if (d.layer == layer) return i;
    if (d.layer == -1 && !global) global = i;
  }
  return global;
}

std::optional<std::size_t> HyperSchema::dropout_index(int layer) const {
  std::optional<std::size_t> global;
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    const auto& d = dims_[i];
    if (d.kind != HyperKind::dropout) continue;
    if (d.layer == layer) return i;
    if (d.layer == -1 && !global) global = i;
  }
  return global;
}

std::optional<std::size_t> HyperSchema::smoothing_index() const {
  for (std::size_t i = 0; i < dims_.size(); ++i)
    if (dims_[i].kind == HyperKind::label_smoothing) return i;
  return std::nullopt;
}

bool HyperSchema::has_l2() const {
  return std::any_of(dims_.begin(), dims_.end(), [](const HyperDim& d) { return d.kind == HyperKind::l2; });
}

double HyperSchema::normalize(std::size_t i, double lambda) const {
  const double lo = std::log(dims_[i].lower), hi = std::log(dims_[i].upper);
  return 2.0 * (std::log(lambda) - lo) / (hi - lo) - 1.0;
}

MemberDistribution initial_distribution(const HyperSchema& schema, bool shrink_l2) {
  MemberDistribution d;
  for (const auto& dim : schema.dims()) {
    double lo = dim.lower, hi = dim.upper;
    if (shrink_l2 && dim.kind == HyperKind::l2 && hi / lo > 100.0) {
      lo *= 10.0;
      hi /= 10.0;
    }
    d.lower.push_back(lo);
    d.upper.push_back(hi);
  }
  return d;
}

void check_distribution(const MemberDistribution& dist) {
  if (dist.lower.size() != dist.upper.size()) throw DistributionError("distribution: bound vectors differ in length");
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const double a = dist.lower[i], b = dist.upper[i];
    if (!(a > 0.0) || !std::isfinite(b)) throw DistributionError("distribution: bounds must be positive and finite");
    if (a == b) throw DistributionError("distribution: zero-width bound at index " + std::to_string(i));
    if (a > b) throw DistributionError("distribution: lower above upper at index " + std::to_string(i));
  }
}

void check_distribution(const MemberDistribution& dist, const HyperSchema& schema) {
  check_distribution(dist);
  if (dist.size() != schema.size()) throw DistributionError("distribution: dimension does not match schema");
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (dist.lower[i] < schema[i].lower || dist.upper[i] > schema[i].upper)
      throw DistributionError("distribution: '" + schema[i].name + "' outside schema bounds");
}

double log_width(double a, double b) { return std::log1p((b - a) / a); }

HyperVector sample(const MemberDistribution& dist, Rng& rng, std::vector<double>* u) {
  check_distribution(dist);
  HyperVector out(dist.size());
  if (u) u->resize(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const double ui = rng.uniform();
    const double la = std::log(dist.lower[i]);
    double v = std::exp(la + ui * log_width(dist.lower[i], dist.upper[i]));
    out[i] = std::clamp(v, dist.lower[i], dist.upper[i]);
    if (u) (*u)[i] = ui;
  }
  return out;
}

double entropy(const MemberDistribution& dist) {
  check_distribution(dist);
  double h = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i)
    h += 0.5 * (std::log(dist.lower[i]) + std::log(dist.upper[i])) + std::log(log_width(dist.lower[i], dist.upper[i]));
  return h;
}

double entropy(std::span<const MemberDistribution> members) {
  double h = 0.0;
  for (const auto& m : members) h += entropy(m);
  return h;
}

HyperVector mean(const MemberDistribution& dist) {
  check_distribution(dist);
  HyperVector out(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const double a = dist.lower[i];
    const double w = log_width(a, dist.upper[i]);
    out[i] = a * std::expm1(w) / w;
  }
  return out;
}

MemberDistribution project(const MemberDistribution& dist, const HyperSchema& schema) {
  if (dist.size() != schema.size()) throw DistributionError("project: dimension does not match schema");
  MemberDistribution out = dist;
  // Widen slightly past the minimum so a second projection sees a feasible pair.
  const double target = kMinLogWidth * (1.0 + 1e-9);
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const double lo = schema[i].lower, hi = schema[i].upper;
    double a = dist.lower[i], b = dist.upper[i];
    if (std::isnan(a)) a = lo;
    if (std::isnan(b)) b = hi;
    if (a > b) std::swap(a, b);
    a = std::clamp(a, lo, hi);
    b = std::clamp(b, lo, hi);
    if (log_width(a, b) < kMinLogWidth) {
      if (log_width(lo, hi) <= target) {
        a = lo;
        b = hi;
      } else {
        const double mid = 0.5 * (std::log(a) + std::log(b));
        const double la = mid - 0.5 * target, lb = mid + 0.5 * target;
        if (la <= std::log(lo)) {
          a = lo;
          b = std::min(hi, lo * std::exp(target));
        } else if (lb >= std::log(hi)) {
          b = hi;
          a = std::max(lo, hi * std::exp(-target));
        } else {
          a = std::max(lo, std::exp(la));
          b = std::min(hi, std::exp(lb));
        }
      }
    }
    out.lower[i] = a;
    out.upper[i] = b;
  }
  return out;
}

void check_hyper_vector(const HyperVector& lambda, const HyperSchema& schema) {
  if (lambda.size() != schema.size()) throw DistributionError("hyperparameter vector does not match schema");
  for (std::size_t i = 0; i < lambda.size(); ++i)
    if (!(lambda[i] >= schema[i].lower && lambda[i] <= schema[i].upper))
      throw DistributionError("hyperparameter '" + schema[i].name + "' = " + std::to_string(lambda[i]) +
                              " outside [" + std::to_string(schema[i].lower) + ", " +
                              std::to_string(schema[i].upper) + "]");
}

Var reparam_normalized(Var log_lower, Var log_upper, const Tensor& u, std::span<const std::size_t> member,
                       const HyperSchema& schema) {
  namespace o = ops;
  const std::size_t m = schema.size();
  if (log_lower.shape() != log_upper.shape() || log_lower.value().rank() != 2 || log_lower.dim(1) != m)
    throw ShapeError("reparam_normalized: bounds " + shape_string(log_lower.shape()));
  if (u.shape() != Shape{member.size(), m}) throw ShapeError("reparam_normalized: uniforms " + shape_string(u.shape()));
  Tape& tape = *log_lower.tape;
  Var la = o::gather_rows(log_lower, member);
  Var lb = o::gather_rows(log_upper, member);
  Var log_lambda = o::add(la, o::mul(tape.constant(u, "uniforms"), o::sub(lb, la)));
  Tensor shift({m}), scale({m});
  for (std::size_t i = 0; i < m; ++i) {
    const double lo = std::log(schema[i].lower), hi = std::log(schema[i].upper);
    shift[i] = -lo;
    scale[i] = 2.0 / (hi - lo);
  }
  Var z = o::mul_lastdim(o::add_lastdim(log_lambda, tape.constant(shift)), tape.constant(scale));
  return o::add_scalar(z, -1.0);
}

Var entropy(Var log_lower, Var log_upper) {
  namespace o = ops;
  return o::sum(o::add(o::scale(o::add(log_lower, log_upper), 0.5), o::log(o::sub(log_upper, log_lower))));
}

}  // namespace hyperens
