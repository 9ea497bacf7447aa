#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hyperens/bestresponse.hpp"
#include "hyperens/grad_check.hpp"
#include "hyperens/layers.hpp"
#include "oracles.hpp"

using namespace hyperens;
namespace o = hyperens::ops;

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> apply_map(const Tensor& U, std::span<const double> e) {
  const std::size_t k = U.dim(0), h = U.dim(1);
  std::vector<double> w(k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t l = 0; l < h; ++l) w[i] += U[i * h + l] * e[l];
  return w;
}

/// Exact minimizer of the expected square-loss objective over a grid:
/// sum_g (A + lambda_g I) U e_g e_g^T = c mean(e)^T, solved as one kh system.
Tensor optimal_u(const RidgeProblem& p, const PolyEmbedding& emb, std::span<const double> grid) {
  const std::size_t n = p.n(), k = p.k(), h = emb.h, G = grid.size();
  Tensor A({k, k});
  std::vector<double> c(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < k; ++a) {
      c[a] += p.phi[i * k + a] * p.y[i] / double(n);
      for (std::size_t b = 0; b < k; ++b) A[a * k + b] += p.phi[i * k + a] * p.phi[i * k + b] / double(n);
    }
  Tensor M({k * h, k * h});
  std::vector<double> rhs(k * h, 0.0);
  for (double lam : grid) {
    auto e = emb(lam);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t a = 0; a < h; ++a) {
        rhs[i * h + a] += c[i] * e[a] / double(G);
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t b = 0; b < h; ++b)
            M[(i * h + a) * k * h + j * h + b] += (A[i * k + j] + (i == j ? lam : 0.0)) * e[a] * e[b] / double(G);
      }
  }
  return Tensor({k, h}, solve_spd(M, rhs));
}

}  // namespace

TEST_CASE("ridge closed form on hand examples") {
  RidgeProblem one;
  one.phi = Tensor({1, 1}, {1.0});
  one.y = {1.0};
  for (double lam : {0.1, 1.0, 7.0}) CHECK(ridge_closed_form(one, lam)[0] == doctest::Approx(1.0 / (1.0 + lam)));

  // Phi = sqrt(n) I and y = sqrt(n) e1 make Phi^T Phi / n = I and Phi^T y / n = e1.
  RidgeProblem eye;
  const std::size_t k = 3;
  eye.phi = Tensor({k, k});
  eye.y = {std::sqrt(3.0), 0.0, 0.0};
  for (std::size_t i = 0; i < k; ++i) eye.phi[i * k + i] = std::sqrt(3.0);
  auto w = ridge_closed_form(eye, 0.5);
  CHECK(w[0] == doctest::Approx(1.0 / 1.5).epsilon(1e-14));
  CHECK(std::abs(w[1]) < 1e-15);
  CHECK(std::abs(w[2]) < 1e-15);
}

TEST_CASE("ridge solutions shrink and satisfy the optimality condition") {
  auto p = make_ridge_problem(100, 6, 3);
  auto w1 = ridge_closed_form(p, 1.0);
  auto wbig = ridge_closed_form(p, 1e6);
  CHECK(norm(wbig) < 1e-4 * norm(w1));
  for (double lam : {1e-3, 0.1, 1.0, 10.0}) CHECK(norm(optimality_residual(p, lam, ridge_closed_form(p, lam))) < 1e-10);

  auto q = make_ridge_problem(150, 5, 4, BrLoss::logistic);
  for (double lam : {1e-3, 0.1, 1.0}) {
    auto wl = solve_best_response(q, lam);
    CHECK(norm(optimality_residual(q, lam, wl)) < 1e-10);
    // Any perturbation increases the strongly convex objective.
    auto bumped = wl;
    bumped[0] += 1e-3;
    CHECK(regularized_objective(q, lam, bumped) > regularized_objective(q, lam, wl));
  }
  CHECK_THROWS(ridge_closed_form(q, 1.0));
  CHECK_THROWS(ridge_closed_form(p, 0.0));
}

TEST_CASE("ill-conditioned systems are rejected") {
  RidgeProblem p;
  p.phi = Tensor({4, 2}, {1, 1, 2, 2, 3, 3, 4, 4});
  p.y = {1, 2, 3, 4};
  CHECK_THROWS_AS(ridge_closed_form(p, 1e-14), ConditioningError);
  CHECK_NOTHROW(ridge_closed_form(p, 1e-2));
}

TEST_CASE("linear algebra helpers") {
  Tensor a({3, 3}, {4, 1, 0, 1, 3, 1, 0, 1, 2});
  auto ev = symmetric_eigenvalues(a);
  // Characteristic polynomial roots of this tridiagonal matrix.
  CHECK(ev[0] + ev[1] + ev[2] == doctest::Approx(9.0));
  CHECK(ev[0] * ev[1] * ev[2] == doctest::Approx(4 * 5 - 1 * 2));
  CHECK(std::is_sorted(ev.begin(), ev.end()));
  auto x = solve_spd(a, std::vector<double>{1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < 3; ++j) r += a[i * 3 + j] * x[j];
    CHECK(r == doctest::Approx(double(i + 1)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(solve_spd(Tensor({2, 2}, {1, 2, 2, 1}), std::vector<double>{1, 1}), ConditioningError);
}

TEST_CASE("low-rank layer forward, weights and gradients") {
  Rng rng(5);
  LowRankSelfTuningDense layer(3, 4, 2, rng);
  for (auto* p : layer.parameters()) p->value = oracle::random_tensor(p->value.shape(), rng);
  Tensor x = oracle::random_tensor({5, 3}, rng), e = oracle::random_tensor({5, 2}, rng);
  Tape tape;
  Tensor y = layer.forward(tape, tape.constant(x), tape.constant(e)).value();
  for (std::size_t j = 0; j < 5; ++j) {
    Tensor w = layer.weight(std::span<const double>(e.data()).subspan(j * 2, 2));
    for (std::size_t c = 0; c < 4; ++c) {
      double ref = layer.b.value[c];
      for (std::size_t i = 0; i < 3; ++i) ref += x[j * 3 + i] * w[i * 4 + c];
      CHECK(y[j * 4 + c] == doctest::Approx(ref).epsilon(1e-12));
    }
  }
  auto params = layer.parameters();
  auto report = grad_check(
      [&](Tape& t) { return o::sum(o::square(layer.forward(t, t.constant(x), t.constant(e)))); }, params, 1e-4);
  CHECK(report.passed);
}

TEST_CASE("low-rank layer with identity H reproduces the self-tuning layer") {
  Rng rng(6);
  const std::size_t in = 3, out = 4, m = 2, N = 5;
  LayerConfig cfg;
  cfg.kind = LayerKind::self_tuning;
  cfg.in = in;
  cfg.out = out;
  cfg.hyper_dims = m;
  EnsembleLayer stn(0, cfg, rng);
  oracle::randomize(stn, rng);
  stn.delta_b.value = Tensor(stn.delta_b.value.shape());

  LowRankSelfTuningDense low(in, out, out, rng);
  low.W.value = stn.W.value.reshaped({in, out});
  low.b.value = stn.b.value.reshaped({out});
  low.G.value = stn.delta.value.reshaped({in, out});
  low.H.value = Tensor({out, out});
  for (std::size_t j = 0; j < out; ++j) low.H.value[j * out + j] = 1.0;

  Tensor x = oracle::random_tensor({N, in}, rng), z = oracle::random_tensor({N, m}, rng, 0.6);
  std::vector<std::size_t> member(N, 0);
  Tape tape;
  RowContext ctx{member, tape.constant(z)};
  auto bd = stn.bind(tape, ctx);
  Tensor a = stn.forward(bd, tape.constant(x)).value();
  Tensor b = low.forward(tape, tape.constant(x), bd.e).value();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("polynomial embedding and grid") {
  PolyEmbedding emb{3, 0.1, 10.0};
  auto lo = emb(0.1), mid = emb(1.0), hi = emb(10.0);
  CHECK(lo == std::vector<double>{1.0, -1.0, 1.0});
  CHECK(std::abs(mid[1]) < 1e-15);
  CHECK(hi[1] == doctest::Approx(1.0));
  auto g = lambda_grid(0.1, 10.0, 4);
  CHECK(g.size() == 4);
  CHECK(g.front() > 0.1);
  CHECK(g.back() < 10.0);
  CHECK(std::sqrt(g[1] * g[2]) == doctest::Approx(1.0));
  PolyEmbedding point{3, 0.5, 0.5};
  CHECK(point(0.5) == std::vector<double>{1.0, 0.0, 0.0});
}

TEST_CASE("a point-mass distribution recovers the single solution") {
  for (BrLoss loss : {BrLoss::square, BrLoss::logistic}) {
    auto p = make_ridge_problem(120, 4, 8, loss);
    p.lambda_lo = p.lambda_hi = 0.3;
    PolyEmbedding emb{2, 0.3, 0.3};
    Rng rng(1);
    BrFitOptions opts;
    opts.steps = 4000;
    opts.lambda_batch = 1;
    auto fit = fit_bestresponse(p, emb, opts, rng);
    auto w = solve_best_response(p, 0.3);
    CAPTURE(to_string(loss));
    CHECK(dist(apply_map(fit.U, emb(0.3)), w) < 1e-3 * norm(w));
    std::vector<double> one{0.3};
    CHECK(gap_report(fit.U, emb, p, one).rows[0].gap < 1e-3);
  }
}

TEST_CASE("zero targets give a zero map") {
  auto p = make_ridge_problem(50, 3, 2);
  std::fill(p.y.begin(), p.y.end(), 0.0);
  Rng rng(2);
  BrFitOptions opts;
  opts.steps = 300;
  auto fit = fit_bestresponse(p, {3, p.lambda_lo, p.lambda_hi}, opts, rng);
  CHECK(norm(fit.U.data()) < 1e-10);
}

TEST_CASE("stochastic fit approaches the exact expected-objective minimizer") {
  auto p = make_ridge_problem(200, 5, 11);
  PolyEmbedding emb{3, p.lambda_lo, p.lambda_hi};
  auto grid = lambda_grid(p.lambda_lo, p.lambda_hi, 256);
  Tensor ustar = optimal_u(p, emb, grid);
  Rng rng(3);
  auto fit = fit_bestresponse(p, emb, {}, rng);
  const double fstar = expected_objective(p, emb, ustar, grid);
  CHECK(fit.final_objective >= fstar - 1e-12);
  CHECK(fit.final_objective - fstar < 1e-6 * std::abs(fstar));
}

TEST_CASE("expected objective decreases over 100-step windows at a small learning rate") {
  auto p = make_ridge_problem(200, 5, 12);
  PolyEmbedding emb{2, p.lambda_lo, p.lambda_hi};
  Rng rng(4);
  BrFitOptions opts;
  opts.steps = 1000;
  opts.optimizer = {OptimizerKind::sgd_momentum, 1e-3, 0.0};
  auto fit = fit_bestresponse(p, emb, opts, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t w = 0; w < 10; ++w) {
    double mean = 0.0;
    for (std::size_t t = w * 100; t < (w + 1) * 100; ++t) mean += fit.objective[t] / 100.0;
    CHECK(mean <= prev);
    prev = mean;
  }
}

TEST_CASE("gap report agrees with the regression oracle") {
  auto p = make_ridge_problem(100, 4, 21);
  PolyEmbedding emb{2, p.lambda_lo, p.lambda_hi};
  auto grid = lambda_grid(p.lambda_lo, p.lambda_hi, 32);
  auto oracle_fit = regression_oracle(p, emb, grid);
  auto rep = gap_report(oracle_fit.U, emb, p, grid);
  REQUIRE(rep.rows.size() == grid.size());
  double mean_sq = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    CHECK(rep.rows[i].gap >= 0.0);
    CHECK(rep.rows[i].gap == doctest::Approx(oracle_fit.residual[i]).epsilon(1e-12));
    CHECK(rep.rows[i].scaled_gap == doctest::Approx(rep.rows[i].gap * std::sqrt(grid[i])).epsilon(1e-12));
    mean_sq += oracle_fit.residual[i] * oracle_fit.residual[i] / double(grid.size());
  }
  CHECK(rep.mean_sq_gap == doctest::Approx(mean_sq).epsilon(1e-12));
  std::vector<double> outside{p.lambda_hi * 2};
  CHECK_THROWS(gap_report(oracle_fit.U, emb, p, outside));

  auto path = std::filesystem::temp_directory_path() / ("hyperens_gap_" + std::to_string(::getpid()) + ".csv");
  write_gap_csv(path, rep);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "lambda0,gap,gap_sqrt_lambda0");
  std::filesystem::remove(path);
}

TEST_CASE("the fitted gap respects the regression bound and shrinks with capacity") {
  for (BrLoss loss : {BrLoss::square, BrLoss::logistic}) {
    auto p = make_ridge_problem(200, 5, 31, loss);
    auto grid = lambda_grid(p.lambda_lo, p.lambda_hi, 64);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t h : {1u, 2u, 4u}) {
      PolyEmbedding emb{h, p.lambda_lo, p.lambda_hi};
      Rng rng(h);
      auto fit = fit_bestresponse(p, emb, {}, rng);
      auto rep = gap_report(fit.U, emb, p, grid);
      auto bound = regression_oracle(p, emb, grid).bound;
      CAPTURE(to_string(loss));
      CAPTURE(h);
      CHECK(rep.mean_weighted_sq_gap <= 2.0 * bound);
      CHECK(rep.mean_sq_gap <= prev);
      prev = rep.mean_sq_gap;
    }
  }
}
