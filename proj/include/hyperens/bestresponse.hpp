#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "hyperens/ops.hpp"
#include "hyperens/optimizer.hpp"
#include "hyperens/rng.hpp"

namespace hyperens {

class ConditioningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense layer W + (G o e) H^T with a rank-h modulation driven by an
/// embedding e of the hyperparameters.
class LowRankSelfTuningDense {
 public:
  LowRankSelfTuningDense(std::size_t in, std::size_t out, std::size_t rank, const Rng& init, bool bias = true);

  /// x [N, in], e [N, rank] -> [N, out]; row j uses e[j].
  Var forward(Tape& tape, Var x, Var e);
  /// The weight matrix for one embedding vector.
  Tensor weight(std::span<const double> e) const;
  std::vector<Parameter*> parameters();
  std::size_t rank() const { return G.value.dim(1); }

  Parameter W, b, G, H;

 private:
  bool bias_;
};

enum class BrLoss { square, logistic };
const char* to_string(BrLoss l);
BrLoss parse_br_loss(const std::string& s);

/// Linear model on fixed features: g(w) = mean_i loss(y_i, phi_i^T w),
/// regularized by (lambda0 / 2) ||w||^2 with lambda0 log-uniform on
/// [lambda_lo, lambda_hi]. Square loss is halved; logistic labels are +-1.
struct RidgeProblem {
  Tensor phi;  // [n, k]
  std::vector<double> y;
  double lambda_lo = 0.1, lambda_hi = 1.0;
  BrLoss loss = BrLoss::square;

  std::size_t n() const { return phi.dim(0); }
  std::size_t k() const { return phi.dim(1); }
  void validate() const;
};

/// Random problem with feature scales decaying geometrically from 1 to
/// `spread`, so the solution path varies over the lambda range.
RidgeProblem make_ridge_problem(std::size_t n, std::size_t k, std::uint64_t seed, BrLoss loss = BrLoss::square,
                                double spread = 0.05, double noise = 0.5);

/// Solves (Phi^T Phi / n + lambda0 I) w = Phi^T y / n for the square loss.
/// Throws ConditioningError when the condition number exceeds 1e12.
std::vector<double> ridge_closed_form(const RidgeProblem& p, double lambda0);
/// w(lambda0) for either loss; the logistic case uses damped Newton to a
/// gradient norm below 1e-13.
std::vector<double> solve_best_response(const RidgeProblem& p, double lambda0);
/// grad g(w) + lambda0 w.
std::vector<double> optimality_residual(const RidgeProblem& p, double lambda0, std::span<const double> w);
/// g(w) + (lambda0 / 2) ||w||^2.
double regularized_objective(const RidgeProblem& p, double lambda0, std::span<const double> w);
/// Lipschitz constant of grad g.
double smoothness(const RidgeProblem& p);

/// Eigenvalues of a symmetric matrix [k, k], ascending (cyclic Jacobi).
std::vector<double> symmetric_eigenvalues(const Tensor& a);
/// Solves a x = rhs for symmetric positive definite a via Cholesky.
std::vector<double> solve_spd(const Tensor& a, std::span<const double> rhs);

/// e(lambda) = (1, t, t^2, ..., t^(h-1)) with t = ln lambda0 rescaled to
/// [-1, 1] over [lo, hi] (t = 0 when lo == hi).
struct PolyEmbedding {
  std::size_t h = 2;
  double lo = 0.1, hi = 1.0;
  std::vector<double> operator()(double lambda0) const;
};

/// Midpoints in log space: a deterministic quadrature of the log-uniform
/// distribution on [lo, hi].
std::vector<double> lambda_grid(double lo, double hi, std::size_t points);

struct BrFitOptions {
  std::size_t steps = 3000;
  /// lambda samples per step, stratified over the log range.
  std::size_t lambda_batch = 16;
  OptimizerConfig optimizer{OptimizerKind::adam, 0.05};
  /// Learning rate decays linearly to zero over the last `decay_fraction` of the steps.
  double decay_fraction = 0.5;
};

struct BrFit {
  Tensor U;  // [k, h]
  /// Minibatch estimate of the expected objective at every step.
  std::vector<double> objective;
  /// Expected objective on a 256-point quadrature grid after the last step.
  double final_objective = 0.0;
};

/// Stochastic minimization over U of E_lambda [g(U e(lambda)) + (lambda0 / 2) ||U e(lambda)||^2].
BrFit fit_bestresponse(const RidgeProblem& p, const PolyEmbedding& emb, const BrFitOptions& opts, Rng& rng);
/// Expected objective of U over a lambda grid.
double expected_objective(const RidgeProblem& p, const PolyEmbedding& emb, const Tensor& U,
                          std::span<const double> grid);

struct GapRow {
  double lambda0 = 0.0, gap = 0.0, scaled_gap = 0.0;  // ||U e - w||, gap * sqrt(lambda0)
};
struct GapReport {
  std::vector<GapRow> rows;
  double mean_sq_gap = 0.0;           // E_Q ||U e - w||^2
  double mean_weighted_sq_gap = 0.0;  // E_Q lambda0 ||U e - w||^2
};
GapReport gap_report(const Tensor& U, const PolyEmbedding& emb, const RidgeProblem& p, std::span<const double> grid);
void write_gap_csv(const std::filesystem::path& path, const GapReport& report);

/// Least-squares fit of w(lambda) onto e(lambda) over the grid, and the
/// resulting bound E_Q[(L + lambda0) ||Delta_app||^2].
struct RegressionOracle {
  Tensor U;
  std::vector<double> residual;  // ||Delta_app|| per grid point
  double bound = 0.0;
};
RegressionOracle regression_oracle(const RidgeProblem& p, const PolyEmbedding& emb, std::span<const double> grid);

}  // namespace hyperens
