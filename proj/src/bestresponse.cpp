#include "hyperens/bestresponse.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hyperens/dataset.hpp"

namespace hyperens {

namespace o = ops;

// ---------------------------------------------------------------------------
// Low-rank self-tuning dense layer

LowRankSelfTuningDense::LowRankSelfTuningDense(std::size_t in, std::size_t out, std::size_t rank, const Rng& init,
                                               bool bias)
    : bias_(bias) {
  if (in == 0 || out == 0 || rank == 0) throw std::invalid_argument("low-rank layer: sizes must be positive");
  auto fill = [](Shape shape, Rng rng, double sd) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.normal(0.0, sd);
    return t;
  };
  W = Parameter("lowrank/W", fill({in, out}, init.derive("lowrank/W"), 1.0 / std::sqrt(double(in))));
  b = Parameter("lowrank/b", Tensor({out}));
  G = Parameter("lowrank/G", fill({in, rank}, init.derive("lowrank/G"), 0.1));
  H = Parameter("lowrank/H", fill({out, rank}, init.derive("lowrank/H"), 1.0 / std::sqrt(double(rank))));
}

Var LowRankSelfTuningDense::forward(Tape& tape, Var x, Var e) {
  if (e.shape().size() != 2 || e.dim(1) != rank() || e.dim(0) != x.dim(0))
    throw ShapeError("low-rank layer: embedding must be [N, " + std::to_string(rank()) + "]");
  Var modulated = o::mul(o::matmul(x, tape.parameter(G)), e);
  Var y = o::add(o::matmul(x, tape.parameter(W)), o::matmul_nt(modulated, tape.parameter(H)));
  return bias_ ? o::add_lastdim(y, tape.parameter(b)) : y;
}

Tensor LowRankSelfTuningDense::weight(std::span<const double> e) const {
  const std::size_t r = W.value.dim(0), s = W.value.dim(1), h = rank();
  if (e.size() != h) throw ShapeError("low-rank layer: embedding size mismatch");
  Tensor out = W.value;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < h; ++l) acc += G.value[i * h + l] * e[l] * H.value[j * h + l];
      out[i * s + j] += acc;
    }
  return out;
}

std::vector<Parameter*> LowRankSelfTuningDense::parameters() {
  std::vector<Parameter*> out{&W, &G, &H};
  if (bias_) out.push_back(&b);
  return out;
}

// ---------------------------------------------------------------------------
// Problem

const char* to_string(BrLoss l) { return l == BrLoss::square ? "square" : "logistic"; }

BrLoss parse_br_loss(const std::string& s) {
  if (s == "square") return BrLoss::square;
  if (s == "logistic") return BrLoss::logistic;
  throw std::invalid_argument("unknown loss '" + s + "' (expected square or logistic)");
}

void RidgeProblem::validate() const {
  if (phi.rank() != 2 || phi.dim(0) == 0 || phi.dim(1) == 0) throw ShapeError("ridge problem: phi must be [n, k]");
  if (y.size() != n()) throw ShapeError("ridge problem: one target per row");
  if (!(lambda_lo > 0.0) || !(lambda_hi >= lambda_lo) || !std::isfinite(lambda_hi))
    throw std::invalid_argument("ridge problem: need 0 < lambda_lo <= lambda_hi");
  if (loss == BrLoss::logistic)
    for (double v : y)
      if (v != 1.0 && v != -1.0) throw std::invalid_argument("ridge problem: logistic labels must be +-1");
}

RidgeProblem make_ridge_problem(std::size_t n, std::size_t k, std::uint64_t seed, BrLoss loss, double spread,
                                double noise) {
  Rng rng = Rng(seed).derive("ridge");
  RidgeProblem p;
  p.loss = loss;
  p.phi = Tensor({n, k});
  std::vector<double> w(k);
  for (double& v : w) v = rng.normal();
  for (std::size_t j = 0; j < k; ++j) {
    const double scale = k == 1 ? 1.0 : std::pow(spread, double(j) / double(k - 1));
    for (std::size_t i = 0; i < n; ++i) p.phi[i * k + j] = scale * rng.normal();
  }
  p.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < k; ++j) m += p.phi[i * k + j] * w[j];
    if (loss == BrLoss::square) {
      p.y[i] = m + noise * rng.normal();
    } else {
      p.y[i] = rng.uniform() < 1.0 / (1.0 + std::exp(-3.0 * m)) ? 1.0 : -1.0;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Linear algebra

std::vector<double> symmetric_eigenvalues(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeError("eigenvalues: square matrix required");
  const std::size_t k = a.dim(0);
  std::vector<double> m(a.data().begin(), a.data().end());
  auto at = [&](std::size_t i, std::size_t j) -> double& { return m[i * k + j]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j) off += at(i, j) * at(i, j);
    if (off < 1e-300) break;
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t q = p + 1; q < k; ++q) {
        if (at(p, q) == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t r = 0; r < k; ++r) {
          const double arp = at(r, p), arq = at(r, q);
          at(r, p) = c * arp - s * arq;
          at(r, q) = s * arp + c * arq;
        }
        for (std::size_t r = 0; r < k; ++r) {
          const double apr = at(p, r), aqr = at(q, r);
          at(p, r) = c * apr - s * aqr;
          at(q, r) = s * apr + c * aqr;
        }
      }
  }
  std::vector<double> ev(k);
  for (std::size_t i = 0; i < k; ++i) ev[i] = at(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

std::vector<double> solve_spd(const Tensor& a, std::span<const double> rhs) {
  const std::size_t k = a.dim(0);
  if (a.rank() != 2 || a.dim(1) != k || rhs.size() != k) throw ShapeError("solve_spd: shape mismatch");
  std::vector<double> L(k * k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    double d = a[j * k + j];
    for (std::size_t l = 0; l < j; ++l) d -= L[j * k + l] * L[j * k + l];
    if (!(d > 0.0)) throw ConditioningError("solve_spd: matrix is not positive definite");
    L[j * k + j] = std::sqrt(d);
    for (std::size_t i = j + 1; i < k; ++i) {
      double v = a[i * k + j];
      for (std::size_t l = 0; l < j; ++l) v -= L[i * k + l] * L[j * k + l];
      L[i * k + j] = v / L[j * k + j];
    }
  }
  std::vector<double> x(rhs.begin(), rhs.end());
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t l = 0; l < i; ++l) x[i] -= L[i * k + l] * x[l];
    x[i] /= L[i * k + i];
  }
  for (std::size_t i = k; i-- > 0;) {
    for (std::size_t l = i + 1; l < k; ++l) x[i] -= L[l * k + i] * x[l];
    x[i] /= L[i * k + i];
  }
  return x;
}

namespace {

/// Phi^T Phi / n.
Tensor gram(const RidgeProblem& p) {
  const std::size_t n = p.n(), k = p.k();
  Tensor g({k, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) g[a * k + b] += p.phi[i * k + a] * p.phi[i * k + b];
  for (double& v : g.data()) v /= double(n);
  return g;
}

std::vector<double> margins(const RidgeProblem& p, std::span<const double> w) {
  const std::size_t n = p.n(), k = p.k();
  std::vector<double> m(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) m[i] += p.phi[i * k + j] * w[j];
  return m;
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

/// d loss / d margin per row.
std::vector<double> margin_grad(const RidgeProblem& p, std::span<const double> m) {
  std::vector<double> d(m.size());
  for (std::size_t i = 0; i < m.size(); ++i)
    d[i] = p.loss == BrLoss::square ? m[i] - p.y[i] : -p.y[i] * sigmoid(-p.y[i] * m[i]);
  return d;
}

std::vector<double> loss_gradient(const RidgeProblem& p, std::span<const double> w) {
  const std::size_t n = p.n(), k = p.k();
  auto d = margin_grad(p, margins(p, w));
  std::vector<double> g(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) g[j] += p.phi[i * k + j] * d[i];
  for (double& v : g) v /= double(n);
  return g;
}

double norm2(std::span<const double> v) { return std::inner_product(v.begin(), v.end(), v.begin(), 0.0); }

std::vector<double> logistic_newton(const RidgeProblem& p, double lambda0) {
  const std::size_t n = p.n(), k = p.k();
  std::vector<double> w(k, 0.0);
  for (int it = 0; it < 200; ++it) {
    auto g = optimality_residual(p, lambda0, w);
    if (std::sqrt(norm2(g)) < 1e-13) break;
    auto m = margins(p, w);
    Tensor hess({k, k});
    for (std::size_t i = 0; i < n; ++i) {
      const double s = sigmoid(m[i]) * sigmoid(-m[i]) / double(n);
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) hess[a * k + b] += s * p.phi[i * k + a] * p.phi[i * k + b];
    }
    for (std::size_t a = 0; a < k; ++a) hess[a * k + a] += lambda0;
    auto step = solve_spd(hess, g);
    const double f0 = regularized_objective(p, lambda0, w), g0 = norm2(g);
    const double slope = std::inner_product(g.begin(), g.end(), step.begin(), 0.0);
    double t = 1.0;
    std::vector<double> trial(k);
    for (;;) {
      for (std::size_t j = 0; j < k; ++j) trial[j] = w[j] - t * step[j];
      // Near the optimum the objective change drowns in rounding; a shrinking
      // gradient is accepted instead.
      if (regularized_objective(p, lambda0, trial) <= f0 - 1e-4 * t * slope) break;
      if (norm2(optimality_residual(p, lambda0, trial)) < 0.25 * g0 || t < 1e-10) break;
      t *= 0.5;
    }
    if (trial == w) break;
    w = trial;
  }
  return w;
}

}  // namespace

double smoothness(const RidgeProblem& p) {
  const double top = symmetric_eigenvalues(gram(p)).back();
  return p.loss == BrLoss::square ? top : top / 4.0;
}

std::vector<double> optimality_residual(const RidgeProblem& p, double lambda0, std::span<const double> w) {
  auto g = loss_gradient(p, w);
  for (std::size_t j = 0; j < g.size(); ++j) g[j] += lambda0 * w[j];
  return g;
}

double regularized_objective(const RidgeProblem& p, double lambda0, std::span<const double> w) {
  auto m = margins(p, w);
  double loss = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    loss += p.loss == BrLoss::square ? 0.5 * (m[i] - p.y[i]) * (m[i] - p.y[i]) : softplus(-p.y[i] * m[i]);
  return loss / double(m.size()) + 0.5 * lambda0 * norm2(w);
}

std::vector<double> ridge_closed_form(const RidgeProblem& p, double lambda0) {
  p.validate();
  if (p.loss != BrLoss::square) throw std::invalid_argument("ridge_closed_form: square loss only");
  if (!(lambda0 > 0.0)) throw std::invalid_argument("ridge_closed_form: lambda0 must be positive");
  const std::size_t n = p.n(), k = p.k();
  Tensor a = gram(p);
  for (std::size_t j = 0; j < k; ++j) a[j * k + j] += lambda0;
  auto ev = symmetric_eigenvalues(a);
  if (!(ev.front() > 0.0) || ev.back() / ev.front() > 1e12)
    throw ConditioningError("ridge_closed_form: condition number above 1e12 at lambda0 = " + format_double(lambda0));
  std::vector<double> rhs(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) rhs[j] += p.phi[i * k + j] * p.y[i];
  for (double& v : rhs) v /= double(n);
  return solve_spd(a, rhs);
}

std::vector<double> solve_best_response(const RidgeProblem& p, double lambda0) {
  if (p.loss == BrLoss::square) return ridge_closed_form(p, lambda0);
  p.validate();
  if (!(lambda0 > 0.0)) throw std::invalid_argument("solve_best_response: lambda0 must be positive");
  return logistic_newton(p, lambda0);
}

// ---------------------------------------------------------------------------
// Embedding and fit

std::vector<double> PolyEmbedding::operator()(double lambda0) const {
  if (h == 0) throw std::invalid_argument("embedding: h must be at least 1");
  double t = 0.0;
  if (hi > lo) t = 2.0 * (std::log(lambda0) - std::log(lo)) / (std::log(hi) - std::log(lo)) - 1.0;
  std::vector<double> e(h);
  double v = 1.0;
  for (std::size_t i = 0; i < h; ++i, v *= t) e[i] = v;
  return e;
}

std::vector<double> lambda_grid(double lo, double hi, std::size_t points) {
  if (points == 0) throw std::invalid_argument("lambda_grid: need at least one point");
  std::vector<double> g(points);
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < points; ++i) g[i] = std::exp(a + (double(i) + 0.5) / double(points) * (b - a));
  return g;
}

namespace {

std::vector<double> apply_u(const Tensor& U, std::span<const double> e) {
  const std::size_t k = U.dim(0), h = U.dim(1);
  std::vector<double> w(k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t l = 0; l < h; ++l) w[i] += U[i * h + l] * e[l];
  return w;
}

}  // namespace

double expected_objective(const RidgeProblem& p, const PolyEmbedding& emb, const Tensor& U,
                          std::span<const double> grid) {
  double total = 0.0;
  for (double lam : grid) total += regularized_objective(p, lam, apply_u(U, emb(lam)));
  return total / double(grid.size());
}

BrFit fit_bestresponse(const RidgeProblem& p, const PolyEmbedding& emb, const BrFitOptions& opts, Rng& rng) {
  p.validate();
  if (opts.steps == 0 || opts.lambda_batch == 0) throw std::invalid_argument("fit_bestresponse: steps and batch must be positive");
  const std::size_t k = p.k(), h = emb.h;
  Parameter U("bestresponse/U", Tensor({k, h}));
  Optimizer opt(opts.optimizer);
  std::vector<Parameter*> params{&U};
  const double la = std::log(p.lambda_lo), lb = std::log(p.lambda_hi);
  const double decay_steps = std::max(1.0, opts.decay_fraction * double(opts.steps));
  BrFit fit;
  for (std::size_t t = 0; t < opts.steps; ++t) {
    U.zero_grad();
    double obj = 0.0;
    for (std::size_t j = 0; j < opts.lambda_batch; ++j) {
      const double u = (double(j) + rng.uniform()) / double(opts.lambda_batch);
      const double lam = std::exp(la + u * (lb - la));
      auto e = emb(lam);
      auto w = apply_u(U.value, e);
      obj += regularized_objective(p, lam, w);
      auto g = optimality_residual(p, lam, w);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t l = 0; l < h; ++l) U.grad[i * h + l] += g[i] * e[l] / double(opts.lambda_batch);
    }
    obj /= double(opts.lambda_batch);
    if (!std::isfinite(obj)) throw NonFiniteError("fit_bestresponse: objective is not finite at step " + std::to_string(t));
    fit.objective.push_back(obj);
    const double remaining = double(opts.steps - t);
    opt.set_learning_rate(opts.optimizer.learning_rate * std::min(1.0, remaining / decay_steps));
    opt.step(params);
  }
  fit.U = U.value;
  fit.final_objective = expected_objective(p, emb, fit.U, lambda_grid(p.lambda_lo, p.lambda_hi, 256));
  return fit;
}

GapReport gap_report(const Tensor& U, const PolyEmbedding& emb, const RidgeProblem& p, std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("gap_report: empty grid");
  GapReport rep;
  for (double lam : grid) {
    if (lam < p.lambda_lo * (1 - 1e-12) || lam > p.lambda_hi * (1 + 1e-12))
      throw std::invalid_argument("gap_report: grid point outside the lambda range");
    auto w = solve_best_response(p, lam);
    auto uw = apply_u(U, emb(lam));
    double sq = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) sq += (uw[i] - w[i]) * (uw[i] - w[i]);
    rep.rows.push_back({lam, std::sqrt(sq), std::sqrt(sq * lam)});
    rep.mean_sq_gap += sq / double(grid.size());
    rep.mean_weighted_sq_gap += lam * sq / double(grid.size());
  }
  return rep;
}

void write_gap_csv(const std::filesystem::path& path, const GapReport& report) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : report.rows)
    rows.push_back({format_double(r.lambda0), format_double(r.gap), format_double(r.scaled_gap)});
  write_csv(path, {"lambda0", "gap", "gap_sqrt_lambda0"}, rows);
}

RegressionOracle regression_oracle(const RidgeProblem& p, const PolyEmbedding& emb, std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("regression_oracle: empty grid");
  const std::size_t k = p.k(), h = emb.h, G = grid.size();
  std::vector<std::vector<double>> es, ws;
  Tensor sigma({h, h});
  for (double lam : grid) {
    es.push_back(emb(lam));
    ws.push_back(solve_best_response(p, lam));
    for (std::size_t a = 0; a < h; ++a)
      for (std::size_t b = 0; b < h; ++b) sigma[a * h + b] += es.back()[a] * es.back()[b] / double(G);
  }
  RegressionOracle out;
  out.U = Tensor({k, h});
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> rhs(h, 0.0);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t a = 0; a < h; ++a) rhs[a] += ws[g][i] * es[g][a] / double(G);
    auto row = solve_spd(sigma, rhs);
    for (std::size_t a = 0; a < h; ++a) out.U[i * h + a] = row[a];
  }
  const double L = smoothness(p);
  for (std::size_t g = 0; g < G; ++g) {
    auto uw = apply_u(out.U, es[g]);
    double sq = 0.0;
    for (std::size_t i = 0; i < k; ++i) sq += (uw[i] - ws[g][i]) * (uw[i] - ws[g][i]);
    out.residual.push_back(std::sqrt(sq));
    out.bound += (L + grid[g]) * sq / double(G);
  }
  return out;
}

}  // namespace hyperens
