#include <cmath>

#include "doctest.h"
#include "hyperens/grad_check.hpp"
#include "hyperens/layers.hpp"
#include "oracles.hpp"

using namespace hyperens;
namespace o = hyperens::ops;

namespace {

LayerConfig dense_cfg(LayerKind kind, std::size_t in, std::size_t out, std::size_t K, std::size_t m = 2) {
  LayerConfig c;
  c.kind = kind;
  c.in = in;
  c.out = out;
  c.members = K;
  c.hyper_dims = m;
  return c;
}

LayerConfig conv_cfg(LayerKind kind, std::size_t cin, std::size_t cout, std::size_t l, std::size_t K, std::size_t m = 2) {
  LayerConfig c = dense_cfg(kind, cin, cout, K, m);
  c.conv = true;
  c.kernel = l;
  return c;
}

std::vector<std::size_t> members_of(std::size_t N, std::size_t K) {
  std::vector<std::size_t> m(N);
  for (std::size_t j = 0; j < N; ++j) m[j] = j * K / N;
  return m;
}

Tensor run(EnsembleLayer& L, const Tensor& x, const std::vector<std::size_t>& member, const Tensor& z) {
  Tape tape;
  RowContext ctx{member, has_modulation(L.config().kind) ? std::optional<Var>(tape.constant(z)) : std::nullopt};
  auto bd = L.bind(tape, ctx);
  return L.forward(bd, tape.constant(x)).value();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

void copy_shared(EnsembleLayer& dst, const EnsembleLayer& src) {
  dst.W.value = src.W.value;
  if (dst.config().bias && src.config().bias) dst.b.value = src.b.value;
  if (has_modulation(dst.config().kind) && has_modulation(src.config().kind)) {
    dst.delta.value = src.delta.value;
    dst.delta_b.value = src.delta_b.value;
    auto dp = dst.embedding.parameters();
    auto sp = const_cast<EnsembleLayer&>(src).embedding.parameters();
    for (std::size_t i = 0; i < dp.size(); ++i) dp[i]->value = sp[i]->value;
  }
  if (has_rank1(dst.config().kind) && has_rank1(src.config().kind)) {
    dst.r.value = src.r.value;
    dst.s.value = src.s.value;
    if (has_modulation(dst.config().kind) && has_modulation(src.config().kind) && !src.config().couple_uv_to_rs) {
      dst.u.value = src.u.value;
      dst.v.value = src.v.value;
    }
  }
}

}  // namespace

TEST_CASE("reduction chain for dense layers is exact") {
  Rng rng(1, 1);
  const std::size_t in = 4, out = 3, N = 6, m = 2;
  Tensor x = oracle::random_tensor({N, in}, rng);
  Tensor z = oracle::random_tensor({N, m}, rng, 0.5);

  // Batch ensemble with unit factors and K=1 equals the plain layer.
  EnsembleLayer plain(0, dense_cfg(LayerKind::plain, in, out, 1), rng);
  oracle::randomize(plain, rng);
  auto be_cfg = dense_cfg(LayerKind::batch_ensemble, in, out, 1);
  be_cfg.rank1_init = Rank1Init::ones;
  EnsembleLayer be1(0, be_cfg, rng);
  copy_shared(be1, plain);
  std::vector<std::size_t> zeros(N, 0);
  CHECK(max_abs_diff(run(plain, x, zeros, z), run(be1, x, zeros, z)) == 0.0);

  // Hyper-batch with a zero embedding equals batch ensemble.
  const std::size_t K = 3;
  auto members = members_of(N, K);
  EnsembleLayer be(0, dense_cfg(LayerKind::batch_ensemble, in, out, K), rng);
  oracle::randomize(be, rng);
  auto hb_cfg = dense_cfg(LayerKind::hyper_batch, in, out, K);
  hb_cfg.embedding.init = EmbeddingInit::zeros;
  EnsembleLayer hb(0, hb_cfg, rng);
  copy_shared(hb, be);
  hb.delta.value = oracle::random_tensor(hb.delta.value.shape(), rng);
  hb.delta_b.value = oracle::random_tensor(hb.delta_b.value.shape(), rng);
  CHECK(max_abs_diff(run(be, x, members, z), run(hb, x, members, z)) == 0.0);

  // K=1 hyper-batch with unit factors equals the self-tuning layer.
  EnsembleLayer stn(0, dense_cfg(LayerKind::self_tuning, in, out, 1, m), rng);
  oracle::randomize(stn, rng);
  auto hb1_cfg = dense_cfg(LayerKind::hyper_batch, in, out, 1, m);
  hb1_cfg.rank1_init = Rank1Init::ones;
  EnsembleLayer hb1(0, hb1_cfg, rng);
  copy_shared(hb1, stn);
  CHECK(max_abs_diff(run(stn, x, zeros, z), run(hb1, x, zeros, z)) == 0.0);

  // Self-tuning with a zero embedding equals the plain layer.
  auto stn0_cfg = dense_cfg(LayerKind::self_tuning, in, out, 1, m);
  stn0_cfg.embedding.init = EmbeddingInit::zeros;
  EnsembleLayer stn0(0, stn0_cfg, rng);
  copy_shared(stn0, plain);
  stn0.delta.value = oracle::random_tensor(stn0.delta.value.shape(), rng);
  CHECK(max_abs_diff(run(plain, x, zeros, z), run(stn0, x, zeros, z)) == 0.0);
}

TEST_CASE("tiled pass equals member-by-member materialized weights") {
  for (LayerKind kind : {LayerKind::batch_ensemble, LayerKind::hyper_batch}) {
    for (std::size_t K : {1u, 2u, 3u, 4u}) {
      for (bool coupled : {false, true}) {
        Rng rng(K, coupled);
        auto cfg = dense_cfg(kind, 3, 5, K, 2);
        cfg.couple_uv_to_rs = coupled;
        EnsembleLayer L(0, cfg, rng);
        oracle::randomize(L, rng);
        const std::size_t b = 3;
        auto tiled = tile_minibatch(oracle::random_tensor({b, 3}, rng), K);
        Tensor z = oracle::random_tensor({b * K, 2}, rng, 0.6);
        double d = max_abs_diff(run(L, tiled.x, tiled.member, z), oracle::layer_forward(L, tiled.x, tiled.member, z));
        CHECK(d < 1e-12);
      }
    }
  }
}

TEST_CASE("rank-1 scale invariance") {
  Rng rng(3, 3);
  EnsembleLayer L(0, dense_cfg(LayerKind::batch_ensemble, 4, 3, 2), rng);
  oracle::randomize(L, rng);
  Tensor x = oracle::random_tensor({4, 4}, rng);
  auto members = members_of(4, 2);
  Tensor before = run(L, x, members, Tensor());
  for (double& v : L.r.value.data()) v *= 3.0;
  for (double& v : L.s.value.data()) v /= 3.0;
  CHECK(max_abs_diff(before, run(L, x, members, Tensor())) < 1e-12);
}

TEST_CASE("self-tuning layer: hand expansion and per-row independence") {
  Rng rng(4, 4);
  auto cfg = dense_cfg(LayerKind::self_tuning, 2, 2, 1, 2);
  cfg.bias = false;
  EnsembleLayer L(0, cfg, rng);
  L.W.value = Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0});
  L.delta.value = Tensor({2, 2}, {0.5, -1.0, 2.0, 0.25});
  L.embedding.C.value = Tensor({2, 2}, {1.0, 0.0, 0.5, 2.0});
  Tensor x({1, 2}, {1.0, -1.0});
  Tensor z({1, 2}, {0.2, -0.4});
  // e = z C = (0.2*1 + -0.4*0.5, 0.2*0 + -0.4*2) = (0, -0.8)
  // W(l) = W + Delta o (1 e^T) = [[1 + 0, 2 + 0.8], [3 + 0, 4 - 0.2]]
  // x W(l) = (1 - 3, 2.8 - 3.8) = (-2, -1)
  Tensor y = run(L, x, {0}, z);
  CHECK(y[0] == doctest::Approx(-2.0).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-14));

  auto full = dense_cfg(LayerKind::self_tuning, 3, 4, 1, 2);
  EnsembleLayer S(0, full, rng);
  oracle::randomize(S, rng);
  Tensor xs = oracle::random_tensor({2, 3}, rng);
  Tensor zs = oracle::random_tensor({2, 2}, rng, 0.5);
  Tensor both = run(S, xs, {0, 0}, zs);
  for (std::size_t j = 0; j < 2; ++j) {
    Tensor xj({1, 3}, {xs[j * 3], xs[j * 3 + 1], xs[j * 3 + 2]});
    Tensor zj({1, 2}, {zs[j * 2], zs[j * 2 + 1]});
    Tensor one = run(S, xj, {0}, zj);
    for (std::size_t q = 0; q < 4; ++q) CHECK(one[q] == both[j * 4 + q]);
  }
}

TEST_CASE("member index out of range is rejected") {
  Rng rng(5, 5);
  EnsembleLayer L(0, dense_cfg(LayerKind::batch_ensemble, 2, 2, 2), rng);
  CHECK_THROWS_AS(run(L, Tensor({1, 2}), {2}, Tensor()), std::out_of_range);
}

TEST_CASE("convolutional layers") {
  Rng rng(6, 6);
  SUBCASE("1x1 degenerate kernel is a scalar multiply") {
    auto cfg = conv_cfg(LayerKind::hyper_batch, 1, 1, 1, 1, 1);
    cfg.rank1_init = Rank1Init::ones;
    cfg.embedding.init = EmbeddingInit::zeros;
    EnsembleLayer L(0, cfg, rng);
    L.W.value[0] = 2.5;
    Tensor x = oracle::random_tensor({1, 3, 3, 1}, rng);
    Tensor y = run(L, x, {0}, Tensor({1, 1}, {0.3}));
    for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == 2.5 * x[i]);
  }
  SUBCASE("tiled pass equals materialized kernels") {
    for (auto padding : {o::Padding::same, o::Padding::valid}) {
      for (LayerKind kind : {LayerKind::batch_ensemble, LayerKind::hyper_batch, LayerKind::self_tuning, LayerKind::plain}) {
        const std::size_t K = has_rank1(kind) ? 2 : 1;
        auto cfg = conv_cfg(kind, 2, 3, 3, K);
        cfg.padding = padding;
        EnsembleLayer L(0, cfg, rng);
        oracle::randomize(L, rng);
        auto tiled = tile_minibatch(oracle::random_tensor({2, 5, 4, 2}, rng), K);
        Tensor z = oracle::random_tensor({2 * K, 2}, rng, 0.5);
        CHECK(max_abs_diff(run(L, tiled.x, tiled.member, z), oracle::layer_forward(L, tiled.x, tiled.member, z)) < 1e-12);
      }
    }
  }
  SUBCASE("gradients of every parameter") {
    auto cfg = conv_cfg(LayerKind::hyper_batch, 2, 2, 3, 2);
    EnsembleLayer L(0, cfg, rng);
    oracle::randomize(L, rng);
    auto tiled = tile_minibatch(oracle::random_tensor({1, 4, 4, 2}, rng), 2);
    Tensor z = oracle::random_tensor({2, 2}, rng, 0.5);
    auto params = L.parameters();
    auto report = grad_check(
        [&](Tape& t) {
          RowContext ctx{tiled.member, t.constant(z)};
          auto bd = L.bind(t, ctx);
          return o::mean(o::tanh(L.forward(bd, t.constant(tiled.x))));
        },
        params, 1e-4);
    for (auto& e : report.entries) {
      INFO(e.name << " " << e.max_rel_error);
      CHECK(e.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("embedding maps") {
  Rng rng(7, 7);
  SUBCASE("linear zero and identity maps") {
    EmbeddingConfig zero{EmbeddingArch::linear, EmbeddingInit::zeros};
    Embedding e0("e/", 3, 3, zero, rng);
    Tape t;
    Tensor z({2, 3}, {0.1, -0.5, 0.9, -1.0, 0.0, 1.0});
    auto out = e0.forward(t, t.constant(z));
    for (double v : out.e.value().data()) CHECK(v == 0.0);
    e0.C.value = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tape t2;
    auto id = e0.forward(t2, t2.constant(z));
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(id.e.value()[i] == z[i]);
  }
  SUBCASE("mlp output bounded by the l1 norm of its head") {
    Embedding mlp("e/", 2, 4, {EmbeddingArch::mlp_tanh_64, EmbeddingInit::random}, rng);
    for (double& v : mlp.c.value.data()) v = rng.normal();
    std::vector<double> bound(4, 0.0);
    for (std::size_t q = 0; q < 4; ++q) {
      bound[q] = std::abs(mlp.c.value[q]);
      for (std::size_t h = 0; h < Embedding::kHidden; ++h) bound[q] += std::abs(mlp.B.value[h * 4 + q]);
    }
    Tensor z = oracle::random_tensor({200, 2}, rng, 3.0);
    Tape t;
    auto out = mlp.forward(t, t.constant(z));
    for (std::size_t j = 0; j < 200; ++j)
      for (std::size_t q = 0; q < 4; ++q) CHECK(std::abs(out.e.value()[j * 4 + q]) <= bound[q]);
    auto ref = oracle::embed(mlp, std::span<const double>(z.data().data(), 2));
    for (std::size_t q = 0; q < 4; ++q) CHECK(out.e.value()[q] == doctest::Approx(ref.first[q]).epsilon(1e-14));
  }
  SUBCASE("embedding gradients") {
    Embedding mlp("e/", 2, 3, {EmbeddingArch::mlp_tanh_64, EmbeddingInit::random}, rng);
    Parameter zp("z", oracle::random_tensor({3, 2}, rng));
    auto params = mlp.parameters();
    params.push_back(&zp);
    auto report = grad_check(
        [&](Tape& t) {
          auto out = mlp.forward(t, t.parameter(zp));
          return o::add(o::sum(o::square(out.e)), o::mean(o::tanh(out.e2)));
        },
        params, 1e-4);
    CHECK(report.passed);
  }
}

TEST_CASE("dropout") {
  Rng rng(8, 8);
  Tape t;
  Tensor xv = oracle::random_tensor({4, 5}, rng);
  Var x = t.constant(xv);
  std::vector<double> zero(4, 0.0), half(4, 0.5);
  CHECK(dropout(x, zero, true, rng).id == x.id);
  CHECK(dropout(x, half, false, rng).id == x.id);
  CHECK_THROWS_AS(dropout(x, std::vector<double>(4, 0.97), true, rng), std::invalid_argument);

  const std::size_t n = 100000;
  Tape t2;
  Var ones = t2.constant(Tensor({n, 1}, 1.0));
  std::vector<double> rate(n, 0.5);
  Tensor y = dropout(ones, rate, true, rng).value();
  double kept = 0.0, mean = 0.0;
  for (double v : y.data()) {
    kept += v != 0.0;
    mean += v;
  }
  kept /= n;
  mean /= n;
  const double sigma = std::sqrt(0.25 / n);
  CHECK(std::abs(kept - 0.5) < 3 * sigma);
  CHECK(std::abs(mean - 1.0) < 3 * 2 * sigma);
}

TEST_CASE("tiling layout and round trip") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t1 = tile_minibatch(x, 1);
  CHECK(t1.x.data() == x.data());
  CHECK(t1.member == std::vector<std::size_t>{0, 0});
  auto t3 = tile_minibatch(x, 3);
  CHECK(t3.member == std::vector<std::size_t>{0, 0, 1, 1, 2, 2});
  Tensor split = split_members(t3.x, 3);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 6; ++i) CHECK(split[k * 6 + i] == x[i]);
  Tensor back = untile_mean(t3.x, 3);
  CHECK(back.data() == x.data());
  std::vector<std::vector<double>> lam{{1.0, 2.0}, {3.0, 4.0}};
  Tensor h = tile_hyper(lam, 2);
  CHECK(h.data() == std::vector<double>{1, 2, 1, 2, 3, 4, 3, 4});
}

TEST_CASE("hyper-batch layer costs about twice a batch-ensemble layer") {
  Rng rng(9, 9);
  for (std::size_t width : {64u, 128u}) {
    for (std::size_t K = 1; K <= 4; ++K) {
      EnsembleLayer be(0, dense_cfg(LayerKind::batch_ensemble, width, width, K), rng);
      EnsembleLayer hb(0, dense_cfg(LayerKind::hyper_batch, width, width, K, 2), rng);
      const std::size_t expected = 2 * width * width + K * (2 * width + 2 * width + 2 * width) + hb.embedding.size();
      CHECK(hb.parameter_count() == expected);
      double ratio = double(hb.parameter_count()) / double(be.parameter_count());
      CHECK(ratio > 1.9);
      CHECK(ratio < 2.6);
    }
  }
}

TEST_CASE("dense layer gradients for every kind") {
  Rng rng(10, 10);
  for (LayerKind kind : {LayerKind::plain, LayerKind::batch_ensemble, LayerKind::self_tuning, LayerKind::hyper_batch}) {
    for (auto arch : {EmbeddingArch::linear, EmbeddingArch::mlp_tanh_64}) {
      const std::size_t K = has_rank1(kind) ? 3 : 1;
      auto cfg = dense_cfg(kind, 3, 4, K);
      cfg.embedding.arch = arch;
      EnsembleLayer L(0, cfg, rng);
      oracle::randomize(L, rng);
      auto tiled = tile_minibatch(oracle::random_tensor({2, 3}, rng), K);
      Tensor z = oracle::random_tensor({2 * K, 2}, rng, 0.5);
      std::vector<double> nu(2 * K), nub(2 * K);
      for (std::size_t j = 0; j < nu.size(); ++j) {
        nu[j] = std::exp(rng.normal());
        nub[j] = std::exp(rng.normal());
      }
      auto params = L.parameters();
      auto report = grad_check(
          [&](Tape& t) {
            RowContext ctx{tiled.member, t.constant(z)};
            auto bd = L.bind(t, ctx);
            Var y = o::mean(o::tanh(L.forward(bd, t.constant(tiled.x))));
            return o::add(y, L.l2(t, bd, ctx, nu, nub));
          },
          params, 1e-4);
      for (auto& e : report.entries) {
        INFO(to_string(kind) << " " << e.name << " " << e.max_rel_error);
        CHECK(e.max_rel_error < 1e-4);
      }
    }
  }
}
