#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "hyperens/selection.hpp"
#include "oracles.hpp"

using namespace hyperens;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("hyperens_sel_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

bool same_tensor(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_bits(a[i], b[i])) return false;
  return true;
}

/// Binary record whose probability of the (always 0) label is p[i].
ModelRecord binary_record(std::size_t id, const std::vector<double>& p) {
  ModelRecord r;
  r.id = id;
  r.val_predictions = Tensor({p.size(), 2});
  for (std::size_t i = 0; i < p.size(); ++i) {
    r.val_predictions[2 * i] = p[i];
    r.val_predictions[2 * i + 1] = 1.0 - p[i];
  }
  return r;
}

Tensor random_probs(std::size_t n, std::size_t C, Rng& rng) {
  Tensor t({n, C});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double v = -std::log(1.0 - rng.uniform());  // exponential draws give a Dirichlet(1) row
      t[i * C + c] = v;
      s += v;
    }
    for (std::size_t c = 0; c < C; ++c) t[i * C + c] /= s;
  }
  return t;
}

std::vector<Tensor> probs_of(const std::vector<ModelRecord>& recs) {
  std::vector<Tensor> out;
  for (const auto& r : recs) out.push_back(r.val_predictions);
  return out;
}

/// Best multiset score with at most `max_unique` distinct ids and at most
/// `max_len` elements, by enumerating multiplicity vectors.
double brute_force_best(const std::vector<Tensor>& probs, std::span<const std::size_t> labels, std::size_t max_unique,
                        std::size_t max_len, std::vector<std::size_t>* best_ids) {
  const std::size_t M = probs.size();
  std::vector<std::size_t> mult(M, 0);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t used) {
    if (i == M) {
      std::vector<std::size_t> ids;
      std::size_t uniq = 0;
      for (std::size_t m = 0; m < M; ++m) {
        if (mult[m]) ++uniq;
        for (std::size_t c = 0; c < mult[m]; ++c) ids.push_back(m);
      }
      if (ids.empty() || uniq > max_unique) return;
      const double s = oracle::multiset_nll(probs, labels, ids);
      if (s < best) {
        best = s;
        if (best_ids) *best_ids = ids;
      }
      return;
    }
    for (std::size_t c = 0; used + c <= max_len; ++c) {
      mult[i] = c;
      rec(i + 1, used + c);
    }
    mult[i] = 0;
  };
  rec(0, 0);
  return best;
}

HyperSchema l2_schema() { return HyperSchema({{"l2", HyperKind::l2, 1e-5, 1e-1}}); }

struct SearchFixture {
  DataSplit split;
  SearchContext ctx;
  SearchFixture(std::size_t epochs = 2) {
    SynthOptions opts;
    opts.nuisance_dims = 2;
    split = split_dataset(synth(SynthKind::two_gaussians, 160, 5, opts), 0.25, 0.25, 5);
    ctx.spec.input_shape = {4};
    ctx.spec.hidden = {8};
    ctx.spec.outputs = 2;
    ctx.schema = l2_schema();
    ctx.plan.epochs = epochs;
    ctx.plan.batch_size = 32;
    ctx.plan.optimizer = {OptimizerKind::adam, 1e-2};
    ctx.train = &split.train;
    ctx.val = &split.val;
    ctx.test = &split.test;
  }
};

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("greedy with K = 1 picks the best single record") {
  // Constant correct-class probabilities give exactly these single-model NLLs.
  std::vector<std::size_t> labels(5, 0);
  std::vector<ModelRecord> recs{binary_record(0, std::vector<double>(5, std::exp(-0.9))),
                                binary_record(1, std::vector<double>(5, std::exp(-0.7))),
                                binary_record(2, std::vector<double>(5, std::exp(-0.8)))};
  auto sel = hyper_ens(recs, labels, 1);
  CHECK(sel.sequence == std::vector<std::size_t>{1});
  CHECK(sel.unique() == 1);
  CHECK(sel.score == doctest::Approx(0.7).epsilon(1e-12));
  auto top = top_k_select(recs, labels, 1);
  CHECK(top.sequence == sel.sequence);
  CHECK(top_k_select(recs, labels, 3).unique() == 3);
  CHECK_THROWS(top_k_select(recs, labels, 4));
}

TEST_CASE("greedy beats top-K on a complementary instance and matches exhaustive search") {
  // A is best alone, B is a weaker copy of A, C is poor alone but covers A's miss.
  std::vector<std::size_t> labels(4, 0);
  std::vector<ModelRecord> recs{binary_record(0, {0.95, 0.95, 0.95, 0.05}), binary_record(1, {0.9, 0.9, 0.9, 0.05}),
                                binary_record(2, {0.3, 0.3, 0.3, 0.99})};
  auto probs = probs_of(recs);
  auto greedy = hyper_ens(recs, labels, 2);
  auto top = top_k_select(recs, labels, 2);
  std::set<std::size_t> g_ids, t_ids;
  for (auto [id, m] : greedy.members) g_ids.insert(id);
  for (auto [id, m] : top.members) t_ids.insert(id);
  CHECK(t_ids == std::set<std::size_t>{0, 1});
  CHECK(g_ids == std::set<std::size_t>{0, 2});
  CHECK(greedy.score < top.score);

  std::vector<std::size_t> best_ids;
  const double best = brute_force_best(probs, labels, 2, 4, &best_ids);
  CHECK(greedy.length() <= 4);
  // Same multiset as the optimum; the order of summation may differ in the last bit.
  auto sorted = greedy.sequence;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == best_ids);
  CHECK(greedy.score == doctest::Approx(best).epsilon(1e-14));
  CHECK(greedy.sequence == oracle::greedy_reference(probs, labels, 2));
}

TEST_CASE("a dominant model is selected repeatedly") {
  std::vector<std::size_t> labels(4, 0);
  std::vector<ModelRecord> recs{binary_record(0, {0.9, 0.9, 0.9, 0.3}), binary_record(1, {0.6, 0.6, 0.6, 0.9})};
  auto probs = probs_of(recs);
  auto sel = hyper_ens(recs, labels, 2);
  REQUIRE(!sel.members.empty());
  CHECK(sel.members[0].first == 0);
  CHECK(sel.members[0].second >= 2);
  CHECK(sel.sequence == std::vector<std::size_t>{0, 1, 0});
  CHECK(sel.sequence == oracle::greedy_reference(probs, labels, 2));
  // Doubling the dominant model beats the plain pair.
  std::vector<std::size_t> pair{0, 1}, weighted{0, 0, 1};
  CHECK(oracle::multiset_nll(probs, labels, weighted) < oracle::multiset_nll(probs, labels, pair));
}

TEST_CASE("greedy matches the reference on random instances") {
  Rng rng(2024);
  for (int inst = 0; inst < 300; ++inst) {
    const std::size_t M = 1 + rng.below(6), n = 1 + rng.below(40), C = 2 + rng.below(3), K = 1 + rng.below(3);
    std::vector<ModelRecord> recs;
    for (std::size_t m = 0; m < M; ++m) {
      ModelRecord r;
      r.id = m;
      // Every third instance copies earlier models to exercise ties.
      if (inst % 3 == 0 && m > 0 && rng.bernoulli(0.5)) r.val_predictions = recs[rng.below(m)].val_predictions;
      else r.val_predictions = random_probs(n, C, rng);
      recs.push_back(std::move(r));
    }
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.below(C);
    auto probs = probs_of(recs);
    auto sel = hyper_ens(recs, labels, K);
    auto ref = oracle::greedy_reference(probs, labels, K);
    CAPTURE(inst);
    REQUIRE(sel.sequence == ref);
    CHECK(same_bits(sel.score, oracle::multiset_nll(probs, labels, ref)));
    CHECK(sel.unique() <= K);
    CHECK(sel.length() <= 5 * K);
    std::size_t total = 0;
    for (auto [id, mult] : sel.members) total += mult;
    CHECK(total == sel.length());
    for (std::size_t s = 1; s < sel.history.size(); ++s) CHECK(sel.history[s].score < sel.history[s - 1].score);
    // First pick is the argmin single score, lowest id on ties.
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t m = 0; m < M; ++m) {
      const double s = ensemble_score({&recs[m]}, labels);
      if (s < best) best = s, arg = m;
    }
    CHECK(sel.sequence.front() == arg);
    CHECK(sel.score <= best);
  }
}

TEST_CASE("failed records are skipped and an all-failed pool is rejected") {
  std::vector<std::size_t> labels(3, 0);
  std::vector<ModelRecord> recs{binary_record(0, {0.6, 0.6, 0.6}), binary_record(1, {0.9, 0.9, 0.9})};
  recs[1].ok = false;
  recs[1].val_predictions = Tensor();
  CHECK(hyper_ens(recs, labels, 2).sequence == std::vector<std::size_t>{0});
  recs[0].ok = false;
  CHECK_THROWS_AS(hyper_ens(recs, labels, 1), std::invalid_argument);
  CHECK_THROWS_AS(hyper_ens({}, labels, 1), std::invalid_argument);
  recs[0].ok = true;
  CHECK_THROWS(hyper_ens(recs, labels, 0));
}

TEST_CASE("deep and fixed-init selections respect their restrictions") {
  Rng rng(3);
  const std::size_t n = 30;
  std::vector<std::size_t> labels(n);
  for (auto& l : labels) l = rng.below(3);
  std::vector<ModelRecord> recs;
  // A 3 x 3 grid: rows share lambda, columns share init seed.
  for (std::size_t row = 0; row < 3; ++row)
    for (std::size_t col = 0; col < 3; ++col) {
      ModelRecord r;
      r.id = row * 3 + col;
      r.lambda = {std::pow(10.0, -double(row + 2))};
      r.init_seed = 100 + col;
      r.val_predictions = random_probs(n, 3, rng);
      recs.push_back(std::move(r));
    }
  auto col = deep_ens(recs, {1e-3}, labels, 3);
  CHECK(col.sequence == std::vector<std::size_t>{3, 4, 5});
  double mean_member = 0.0;
  for (std::size_t id : col.sequence) mean_member += ensemble_score({&recs[id]}, labels) / 3.0;
  CHECK(col.score <= mean_member);
  CHECK(deep_ens(recs, {1e-3}, labels, 1).sequence == std::vector<std::size_t>{3});
  CHECK_THROWS(deep_ens(recs, {1e-3}, labels, 4));
  CHECK_THROWS(deep_ens(recs, {0.5}, labels, 1));

  for (std::uint64_t seed : {100, 101, 102}) {
    auto sel = fixed_init_hyper_ens(recs, seed, labels, 3);
    for (auto [id, m] : sel.members) CHECK(recs[id].init_seed == seed);
  }
  CHECK_THROWS(fixed_init_hyper_ens(recs, 7, labels, 2));
}

TEST_CASE("selection metrics weight members by multiplicity") {
  Rng rng(8);
  const std::size_t n = 25;
  std::vector<std::size_t> labels(n);
  for (auto& l : labels) l = rng.below(2);
  std::vector<ModelRecord> recs;
  for (std::size_t m = 0; m < 2; ++m) {
    ModelRecord r;
    r.id = m;
    r.val_predictions = random_probs(n, 2, rng);
    r.test_predictions = random_probs(n, 2, rng);
    recs.push_back(std::move(r));
  }
  auto single = EnsembleSelection::from_sequence({1});
  auto rep = selection_metrics(recs, single, labels, true);
  auto basic = basic_metrics(recs[1].test_predictions, labels);
  CHECK(rep.nll == doctest::Approx(basic.nll).epsilon(1e-14));
  CHECK(!rep.diversity);

  auto weighted = EnsembleSelection::from_sequence({0, 1, 0});
  CHECK(weighted.members == std::vector<std::pair<std::size_t, std::size_t>>{{0, 2}, {1, 1}});
  Tensor avg({n, 2});
  for (std::size_t i = 0; i < avg.size(); ++i)
    avg[i] = (2.0 * recs[0].val_predictions[i] + recs[1].val_predictions[i]) / 3.0;
  auto rw = selection_metrics(recs, weighted, labels, false);
  CHECK(rw.nll == doctest::Approx(basic_metrics(avg, labels).nll).epsilon(1e-12));
  CHECK(rw.diversity.has_value());
  std::vector<const ModelRecord*> ptrs{&recs[0], &recs[1], &recs[0]};
  CHECK(rw.nll == doctest::Approx(ensemble_score(ptrs, labels)).epsilon(1e-12));

  auto j = selection_to_json(weighted);
  CHECK(j["unique"] == 2);
  CHECK(j["members"][0]["multiplicity"] == 2);
}

TEST_CASE("records survive a JSON round trip") {
  ModelRecord r;
  r.id = 7;
  r.stage = "stratify";
  r.lambda = {0.1 / 3.0, 1e-5};
  r.init_seed = 0xfedcba9876543210ull;
  r.predictions = "preds/stratify_7.bin";
  r.val_nll = 0.123456789;
  r.val_accuracy = 0.75;
  r.row = 2;
  r.column = 1;
  ModelRecord back = record_from_json(json::parse(record_to_json(r).dump()));
  CHECK(back.id == 7);
  CHECK(back.stage == "stratify");
  CHECK(same_bits(back.lambda[0], r.lambda[0]));
  CHECK(back.init_seed == r.init_seed);
  CHECK(same_bits(back.val_nll, r.val_nll));
  CHECK(back.row == 2);
  CHECK(back.column == 1);

  r.ok = false;
  r.failure = "diverged: loss";
  back = record_from_json(record_to_json(r));
  CHECK(!back.ok);
  CHECK(std::isinf(back.val_nll));
  CHECK(back.failure == "diverged: loss");
  CHECK_THROWS_AS(record_from_json(json{{"id", 1}}), std::invalid_argument);
}

TEST_CASE("random search is reproducible, in bounds and resumable") {
  SearchFixture f;
  auto a = rand_search(f.ctx, 3, 11);
  auto b = rand_search(f.ctx, 3, 11);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i].id == i);
    CHECK(a[i].ok);
    CHECK(a[i].lambda == b[i].lambda);
    CHECK(a[i].init_seed == b[i].init_seed);
    CHECK(same_tensor(a[i].val_predictions, b[i].val_predictions));
    CHECK(a[i].lambda[0] >= 1e-5);
    CHECK(a[i].lambda[0] <= 1e-1);
    CHECK(a[i].test_predictions.dim(0) == f.split.test.size());
  }
  CHECK(a[0].init_seed != a[1].init_seed);
  CHECK(rand_search(f.ctx, 1, 11)[0].lambda == a[0].lambda);

  TempDir full, resumed;
  f.ctx.out_dir = full.path;
  f.ctx.workers = 2;
  auto ref = rand_search(f.ctx, 4, 11);
  CHECK(count_lines(full.path / "ledger.jsonl") == 4);

  f.ctx.out_dir = resumed.path;
  f.ctx.workers = 1;
  rand_search(f.ctx, 2, 11);
  CHECK(count_lines(resumed.path / "ledger.jsonl") == 2);
  auto rest = rand_search(f.ctx, 4, 11);
  CHECK(count_lines(resumed.path / "ledger.jsonl") == 4);
  // Re-running a finished search trains nothing.
  rand_search(f.ctx, 4, 11);
  CHECK(count_lines(resumed.path / "ledger.jsonl") == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(same_tensor(ref[i].val_predictions, rest[i].val_predictions));
    CHECK(same_tensor(ref[i].test_predictions, rest[i].test_predictions));
  }
  auto loaded = load_records(resumed.path, "search");
  REQUIRE(loaded.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(same_bits(loaded[i].val_nll, ref[i].val_nll));
    CHECK(same_tensor(loaded[i].val_predictions, ref[i].val_predictions));
  }
}

TEST_CASE("best searched record is no worse than the median") {
  SearchFixture f(1);
  auto recs = rand_search(f.ctx, 10, 4);
  std::vector<double> nll;
  for (const auto& r : recs) nll.push_back(r.val_nll);
  std::sort(nll.begin(), nll.end());
  CHECK(nll.front() <= nll[nll.size() / 2]);
}

TEST_CASE("hyper-deep ensembles stratify the greedy pick") {
  SearchFixture f;
  TempDir dir;
  f.ctx.out_dir = dir.path;
  const std::size_t K = 2, kappa = 4;
  auto res = hyper_deep_ens(f.ctx, K, kappa, 21, true);
  CHECK(res.search.size() == kappa);
  CHECK(res.grid.size() == K * res.initial.unique());
  const std::size_t retrained = std::count_if(res.grid.begin(), res.grid.end(), [&](const ModelRecord& r) {
    return r.column != 0u;
  });
  CHECK(retrained == (K - 1) * res.initial.unique());
  std::set<std::size_t> grid_ids;
  for (const auto& r : res.grid) {
    grid_ids.insert(r.id);
    REQUIRE(r.row.has_value());
    const auto& src = res.search.at(*r.row);
    CHECK(r.lambda == src.lambda);
    if (r.column == 0u) CHECK(same_tensor(r.val_predictions, src.val_predictions));
    CHECK(r.id >= kappa);
  }
  for (auto [id, m] : res.final.members) CHECK(grid_ids.count(id));
  CHECK(res.final.unique() <= K);
  CHECK(count_lines(dir.path / "ledger.jsonl") == kappa + retrained);

  // Without reuse every cell is trained.
  f.ctx.out_dir.clear();
  auto fresh = hyper_deep_ens(f.ctx, K, kappa, 21, false);
  CHECK(fresh.grid.size() == K * fresh.initial.unique());
  for (const auto& r : fresh.grid) {
    CHECK(r.init_seed != res.search.at(*r.row).init_seed);
    for (const auto& other : fresh.grid)
      if (other.column == r.column) CHECK(other.init_seed == r.init_seed);
  }
  if (fresh.initial.unique() > 1) {
    // A column is a fixed-init hyper ensemble candidate set.
    auto row = fixed_init_hyper_ens(fresh.grid, fresh.grid[0].init_seed, f.split.val.labels, K);
    for (auto [id, m] : row.members)
      for (const auto& r : fresh.grid)
        if (r.id == id) CHECK(r.init_seed == fresh.grid[0].init_seed);
  }
}

TEST_CASE("hyper-deep ensembles with K = 1 keep the best searched model") {
  SearchFixture f;
  auto res = hyper_deep_ens(f.ctx, 1, 3, 9, true);
  std::size_t best = 0;
  for (std::size_t i = 1; i < res.search.size(); ++i)
    if (res.search[i].val_nll < res.search[best].val_nll) best = i;
  REQUIRE(res.final.unique() == 1);
  const auto& pick = *std::find_if(res.grid.begin(), res.grid.end(),
                                   [&](const ModelRecord& r) { return r.id == res.final.sequence[0]; });
  CHECK(pick.row == best);
  CHECK(same_tensor(pick.val_predictions, res.search[best].val_predictions));
}
