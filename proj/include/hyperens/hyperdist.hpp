#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyperens/rng.hpp"
#include "hyperens/tape.hpp"

namespace hyperens {

class SchemaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DistributionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class HyperKind { l2, dropout, label_smoothing };
enum class L2Part { weights, bias, both };

const char* to_string(HyperKind kind);
const char* to_string(L2Part part);
HyperKind parse_hyper_kind(const std::string& s);
L2Part parse_l2_part(const std::string& s);

/// One hyperparameter. `layer` is the index of the dense/conv layer it acts on,
/// or -1 for every layer. `part` only matters for l2.
struct HyperDim {
  std::string name;
  HyperKind kind = HyperKind::l2;
  double lower = 1e-3;
  double upper = 1e3;
  L2Part part = L2Part::both;
  int layer = -1;
};

class HyperSchema {
 public:
  HyperSchema() = default;
  explicit HyperSchema(std::vector<HyperDim> dims);

  std::size_t size() const { return dims_.size(); }
  const HyperDim& operator[](std::size_t i) const { return dims_[i]; }
  const std::vector<HyperDim>& dims() const { return dims_; }
  std::optional<std::size_t> index_of(const std::string& name) const;

  /// Entry holding the L2 strength for a layer's weights or bias. Layer-specific
  /// entries win over global ones.
  std::optional<std::size_t> l2_index(int layer, L2Part part) const;
  std::optional<std::size_t> dropout_index(int layer) const;
  std::optional<std::size_t> smoothing_index() const;
  bool has_l2() const;

  /// ln(lambda) mapped affinely from [ln lower, ln upper] to [-1, 1].
  double normalize(std::size_t i, double lambda) const;

 private:
  std::vector<HyperDim> dims_;
};

using HyperVector = std::vector<double>;

/// Independent log-uniform factors on [lower_i, upper_i].
struct MemberDistribution {
  std::vector<double> lower;
  std::vector<double> upper;

  std::size_t size() const { return lower.size(); }
  bool operator==(const MemberDistribution&) const = default;
};

inline constexpr double kMinLogWidth = 1e-4;

/// Full schema range, or with each l2 range shrunk by one decade on both ends.
MemberDistribution initial_distribution(const HyperSchema& schema, bool shrink_l2 = false);

/// Throws DistributionError when a bound is non-positive, inverted or equal.
void check_distribution(const MemberDistribution& dist);
/// Additionally checks containment in the schema bounds.
void check_distribution(const MemberDistribution& dist, const HyperSchema& schema);

/// lambda_i = exp(ln a_i + u_i (ln b_i - ln a_i)). When `u` is given it receives
/// the uniforms, which is all the tuning step needs for pathwise derivatives.
HyperVector sample(const MemberDistribution& dist, Rng& rng, std::vector<double>* u = nullptr);

/// Sum over dimensions of 0.5 (ln a + ln b) + ln(ln b - ln a).
double entropy(const MemberDistribution& dist);
/// Entropy of the product over members.
double entropy(std::span<const MemberDistribution> members);

/// (b - a) / (ln b - ln a), computed stably for nearly equal bounds.
HyperVector mean(const MemberDistribution& dist);

/// log(b / a) without cancellation when a and b are close.
double log_width(double a, double b);

/// Restores a feasible distribution: reorders, clips into the schema bounds and
/// widens to a log-width of at least kMinLogWidth. Identity on feasible inputs.
MemberDistribution project(const MemberDistribution& dist, const HyperSchema& schema);

/// Values inside the schema bounds; throws DistributionError otherwise.
void check_hyper_vector(const HyperVector& lambda, const HyperSchema& schema);

/// Tape form of sampling for the tuning step. Row j draws from member
/// member[j]: ln lambda = la_k + u_j (lb_k - la_k) with u held fixed. Returns the
/// rows normalized per the schema, ready for the embedding. la, lb are [K, m].
Var reparam_normalized(Var log_lower, Var log_upper, const Tensor& u, std::span<const std::size_t> member,
                       const HyperSchema& schema);

/// Tape form of the product entropy over all rows of [K, m] log-bounds.
Var entropy(Var log_lower, Var log_upper);

}  // namespace hyperens
