#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "hyperens/hyperdist.hpp"

using namespace hyperens;

namespace {

MemberDistribution one(double a, double b) { return {{a}, {b}}; }

HyperSchema wide_schema() {
  return HyperSchema({{"l2", HyperKind::l2, 1e-3, 1e3}, {"drop", HyperKind::dropout, 1e-3, 0.9}});
}

// Two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::vector<double> x, std::vector<double> y) {
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] <= v) ++i;
    while (j < y.size() && y[j] <= v) ++j;
    d = std::max(d, std::abs(double(i) / x.size() - double(j) / y.size()));
  }
  return d;
}

}  // namespace

TEST_CASE("schema validation") {
  CHECK_THROWS_AS(HyperSchema({{"a", HyperKind::l2, 1.0, 1.0}}), SchemaError);
  CHECK_THROWS_AS(HyperSchema({{"a", HyperKind::l2, 0.0, 1.0}}), SchemaError);
  CHECK_THROWS_AS(HyperSchema({{"a", HyperKind::l2, 1e-3, 1.0}, {"a", HyperKind::l2, 1e-3, 1.0}}), SchemaError);
  CHECK_THROWS_AS(HyperSchema({{"d", HyperKind::dropout, 1e-3, 0.99}}), SchemaError);
  CHECK_NOTHROW(wide_schema());
}

TEST_CASE("schema lookup prefers layer-specific entries") {
  HyperSchema s({{"g", HyperKind::l2, 1e-3, 1e3, L2Part::both, -1},
                 {"w1", HyperKind::l2, 1e-3, 1e3, L2Part::weights, 1},
                 {"d", HyperKind::dropout, 1e-3, 0.9, L2Part::both, -1}});
  CHECK(s.l2_index(0, L2Part::weights) == 0u);
  CHECK(s.l2_index(1, L2Part::weights) == 1u);
  CHECK(s.l2_index(1, L2Part::bias) == 0u);
  CHECK(s.dropout_index(3) == 2u);
  CHECK_FALSE(s.smoothing_index().has_value());
  CHECK(s.normalize(0, 1e-3) == doctest::Approx(-1.0));
  CHECK(s.normalize(0, 1.0) == doctest::Approx(0.0));
  CHECK(s.normalize(0, 1e3) == doctest::Approx(1.0));
}

TEST_CASE("sample: support, collapse and errors") {
  Rng rng(1, 1);
  auto d = one(0.5, 40.0);
  for (int i = 0; i < 2000; ++i) {
    double v = sample(d, rng)[0];
    CHECK(v >= 0.5);
    CHECK(v <= 40.0);
  }
  auto narrow = one(2.0, 2.0 * (1 + 1e-12));
  for (int i = 0; i < 10; ++i) CHECK(sample(narrow, rng)[0] == doctest::Approx(2.0).epsilon(1e-11));
  CHECK_THROWS_AS(sample(one(2.0, 2.0), rng), DistributionError);

  std::vector<double> u;
  auto d2 = one(1.0, std::exp(3.0));
  double v = sample(d2, rng, &u)[0];
  CHECK(std::log(v) == doctest::Approx(3.0 * u[0]).epsilon(1e-12));
}

TEST_CASE("sample mean and entropy estimate match closed forms within 3 standard errors") {
  Rng rng(17, 3);
  const double a = 1.0, b = std::numbers::e;
  const int n = 100000;
  double s = 0.0, s2 = 0.0, h = 0.0, h2 = 0.0;
  const double w = std::log(b) - std::log(a);
  for (int i = 0; i < n; ++i) {
    double v = sample(one(a, b), rng)[0];
    s += v;
    s2 += v * v;
    double nl = std::log(v * w);  // -log density of 1/(v w)
    h += nl;
    h2 += nl * nl;
  }
  const double m = s / n, se = std::sqrt((s2 / n - m * m) / n);
  CHECK(std::abs(m - (b - a) / w) < 3 * se);
  CHECK(std::abs(m - mean(one(a, b))[0]) < 3 * se);
  const double hm = h / n, hse = std::sqrt((h2 / n - hm * hm) / n);
  CHECK(std::abs(hm - entropy(one(a, b))) < 3 * hse);
}

TEST_CASE("entropy examples") {
  CHECK(entropy(one(1.0, std::exp(2.0))) == doctest::Approx(1.0 + std::log(2.0)).epsilon(1e-12));
  CHECK(entropy(one(1.0, std::numbers::e)) == doctest::Approx(0.5).epsilon(1e-12));
  std::vector<MemberDistribution> members{one(1.0, 3.0), one(0.1, 7.0), one(2.0, 2.5)};
  double total = 0.0;
  for (auto& m : members) total += entropy(m);
  CHECK(entropy(members) == doctest::Approx(total).epsilon(1e-14));
  MemberDistribution two{{1.0, 0.1}, {3.0, 7.0}};
  CHECK(entropy(two) == doctest::Approx(entropy(members[0]) + entropy(members[1])).epsilon(1e-14));
  // Raising the upper bound, or widening around the log-midpoint, raises entropy.
  CHECK(entropy(one(1.0, 10.0)) < entropy(one(1.0, 11.0)));
  CHECK(entropy(one(1.0, 10.0)) < entropy(one(0.9, 10.0 / 0.9)));
  // Lowering only the lower bound raises it only while the log-width is below 2.
  CHECK(entropy(one(1.0, 5.0)) < entropy(one(0.9, 5.0)));
  CHECK(entropy(one(1.0, 10.0)) > entropy(one(0.9, 10.0)));
}

TEST_CASE("mean examples") {
  CHECK(mean(one(1.0, std::numbers::e))[0] == doctest::Approx(std::numbers::e - 1.0).epsilon(1e-14));
  const double a = 3.7;
  CHECK(std::abs(mean(one(a, a * (1 + 1e-8)))[0] - a) / a < 1e-6);
  CHECK(mean(one(1e-3, 1e3))[0] == doctest::Approx((1000.0 - 0.001) / std::log(1e6)).epsilon(1e-12));
  CHECK(mean(one(1e-3, 1e3))[0] == doctest::Approx(72.38).epsilon(1e-4));
}

TEST_CASE("project examples and idempotence") {
  HyperSchema s = wide_schema();
  MemberDistribution inverted{{2.0, 0.1}, {1.0, 0.2}};
  auto p = project(inverted, s);
  CHECK(p.lower[0] < p.upper[0]);
  CHECK(std::log(p.upper[0]) - std::log(p.lower[0]) >= kMinLogWidth);
  CHECK(p.lower[0] == 1.0);
  CHECK(p.upper[0] == 2.0);

  MemberDistribution feasible{{0.3, 0.01}, {40.0, 0.5}};
  CHECK(project(feasible, s) == feasible);

  MemberDistribution over{{0.3, 0.01}, {5e3, 0.95}};
  auto q = project(over, s);
  CHECK(q.upper[0] == 1e3);
  CHECK(q.upper[1] == 0.9);

  MemberDistribution collapsed{{5.0, 0.9}, {5.0, 0.9}};
  auto c = project(collapsed, s);
  CHECK(log_width(c.lower[0], c.upper[0]) >= kMinLogWidth);
  CHECK(log_width(c.lower[1], c.upper[1]) >= kMinLogWidth);
  CHECK(c.upper[1] == 0.9);
  CHECK(std::sqrt(c.lower[0] * c.upper[0]) == doctest::Approx(5.0).epsilon(1e-12));

  Rng rng(2, 2);
  for (int t = 0; t < 2000; ++t) {
    MemberDistribution d{{std::exp(rng.uniform(-10, 10)), std::exp(rng.uniform(-10, 1))},
                         {std::exp(rng.uniform(-10, 10)), std::exp(rng.uniform(-10, 1))}};
    if (t % 5 == 0) d.upper[0] = d.lower[0] * (1 + rng.uniform() * 1e-4);
    if (t % 7 == 0) d.lower[1] = 0.9 * (1 - 1e-7);
    auto once = project(d, s);
    CHECK_NOTHROW(check_distribution(once, s));
    for (std::size_t i = 0; i < 2; ++i) CHECK(log_width(once.lower[i], once.upper[i]) >= kMinLogWidth);
    CHECK(project(once, s) == once);
  }
}

TEST_CASE("sampling is scale covariant") {
  const double a = 0.2, b = 30.0, c = 17.0;
  Rng r1(5, Rng::stream_key(1, "ks")), r2(5, Rng::stream_key(2, "ks"));
  std::vector<double> x, y;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    x.push_back(std::log(sample(one(a, b), r1)[0]));
    y.push_back(std::log(sample(one(c * a, c * b), r2)[0]) - std::log(c));
  }
  // Critical value at level 0.001.
  CHECK(ks_statistic(x, y) < 1.95 * std::sqrt(2.0 / n));
}

TEST_CASE("initial distribution and containment checks") {
  HyperSchema s = wide_schema();
  auto full = initial_distribution(s);
  CHECK(full.lower[0] == 1e-3);
  CHECK(full.upper[0] == 1e3);
  auto shrunk = initial_distribution(s, true);
  CHECK(shrunk.lower[0] == doctest::Approx(1e-2));
  CHECK(shrunk.upper[0] == doctest::Approx(1e2));
  CHECK(shrunk.upper[1] == 0.9);
  CHECK_THROWS_AS(check_hyper_vector({1e4, 0.5}, s), DistributionError);
  CHECK_NOTHROW(check_hyper_vector({1e2, 0.5}, s));
}
