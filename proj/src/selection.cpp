#include "hyperens/selection.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <thread>

namespace hyperens {

namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next++;
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<const ModelRecord*> ok_by_id(const std::vector<ModelRecord>& records, std::span<const std::size_t> labels) {
  std::vector<const ModelRecord*> ok;
  for (const auto& r : records) {
    if (!r.ok) continue;
    if (r.val_predictions.rank() != 2 || r.val_predictions.dim(0) != labels.size())
      throw ShapeError("record " + std::to_string(r.id) + ": validation predictions do not match the labels");
    ok.push_back(&r);
  }
  if (ok.empty()) throw std::invalid_argument("selection: no successful records");
  std::sort(ok.begin(), ok.end(), [](const ModelRecord* a, const ModelRecord* b) { return a->id < b->id; });
  for (std::size_t i = 1; i < ok.size(); ++i)
    if (ok[i]->id == ok[i - 1]->id) throw std::invalid_argument("selection: duplicate record id " + std::to_string(ok[i]->id));
  return ok;
}

const ModelRecord& find_record(const std::vector<ModelRecord>& records, std::size_t id) {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw std::out_of_range("no record with id " + std::to_string(id));
}

std::string prediction_name(const std::string& stage, std::size_t id) {
  return "preds/" + stage + "_" + std::to_string(id) + ".bin";
}

}  // namespace

// ---------------------------------------------------------------------------
// Records

json record_to_json(const ModelRecord& r) {
  json j{{"id", r.id},
         {"stage", r.stage},
         {"lambda", r.lambda},
         {"init_seed", r.init_seed},
         {"status", r.ok ? "ok" : "failed"},
         {"checkpoint", r.checkpoint},
         {"predictions", r.predictions}};
  if (r.ok) {
    j["metrics"] = {{"val_nll", r.val_nll}, {"val_accuracy", r.val_accuracy}};
  } else {
    j["failure"] = r.failure;
  }
  if (r.row) j["row"] = *r.row;
  if (r.column) j["column"] = *r.column;
  return j;
}

ModelRecord record_from_json(const json& j) {
  ModelRecord r;
  try {
    r.id = j.at("id").get<std::size_t>();
    r.stage = j.value("stage", "search");
    r.lambda = j.at("lambda").get<HyperVector>();
    r.init_seed = j.at("init_seed").get<std::uint64_t>();
    r.ok = j.at("status").get<std::string>() == "ok";
    r.checkpoint = j.value("checkpoint", "");
    r.predictions = j.value("predictions", "");
    if (r.ok) {
      r.val_nll = j.at("metrics").at("val_nll").get<double>();
      r.val_accuracy = j.at("metrics").at("val_accuracy").get<double>();
    } else {
      r.failure = j.value("failure", "");
      r.val_nll = kInf;
    }
    if (j.contains("row")) r.row = j["row"].get<std::size_t>();
    if (j.contains("column")) r.column = j["column"].get<std::size_t>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed model record: ") + e.what());
  }
  return r;
}

void load_predictions(ModelRecord& r, const fs::path& out_dir) {
  if (!r.ok || r.predictions.empty()) return;
  auto arrays = load_checkpoint(out_dir / r.predictions);
  r.val_predictions = find_array(arrays, "val");
  for (const auto& [name, t] : arrays)
    if (name == "test") r.test_predictions = t;
}

std::vector<ModelRecord> load_records(const fs::path& out_dir, const std::string& stage) {
  std::map<std::size_t, ModelRecord> by_id;
  for (const auto& j : scan_records(out_dir / "ledger.jsonl").records) {
    if (j.value("type", "") != "model") continue;
    ModelRecord r = record_from_json(j);
    if (!stage.empty() && r.stage != stage) continue;
    by_id[r.id] = std::move(r);
  }
  std::vector<ModelRecord> out;
  for (auto& [id, r] : by_id) {
    try {
      load_predictions(r, out_dir);
    } catch (const std::exception& e) {
      throw CheckpointError("record " + std::to_string(id) + ": " + e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selection

EnsembleSelection EnsembleSelection::from_sequence(std::vector<std::size_t> ids) {
  EnsembleSelection s;
  s.sequence = std::move(ids);
  for (std::size_t id : s.sequence) {
    auto it = std::find_if(s.members.begin(), s.members.end(), [&](const auto& m) { return m.first == id; });
    if (it == s.members.end()) s.members.emplace_back(id, 1);
    else ++it->second;
  }
  return s;
}

double ensemble_score(const std::vector<const ModelRecord*>& members, std::span<const std::size_t> labels) {
  if (members.empty()) throw std::invalid_argument("ensemble_score: empty ensemble");
  const std::size_t n = labels.size(), C = members[0]->val_predictions.dim(1);
  double nll = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = 0.0;
    for (const ModelRecord* m : members) p += m->val_predictions[i * C + labels[i]];
    p /= double(members.size());
    nll -= std::log(std::max(p, kProbFloor));
  }
  return nll / double(n);
}

EnsembleSelection hyper_ens(const std::vector<ModelRecord>& records, std::span<const std::size_t> labels, std::size_t K) {
  if (K == 0) throw std::invalid_argument("hyper_ens: K must be at least 1");
  auto ok = ok_by_id(records, labels);
  std::vector<const ModelRecord*> chosen;
  std::set<std::size_t> unique;
  std::vector<std::size_t> ids;
  std::vector<SelectionStep> history;
  double best = kInf;
  while (chosen.size() < 5 * K) {
    const ModelRecord* pick = nullptr;
    double pick_score = kInf;
    for (const ModelRecord* c : ok) {
      if (unique.size() >= K && !unique.count(c->id)) continue;
      chosen.push_back(c);
      const double s = ensemble_score(chosen, labels);
      chosen.pop_back();
      if (!pick || s < pick_score) {
        pick = c;
        pick_score = s;
      }
    }
    if (!pick || !(pick_score < best)) break;
    chosen.push_back(pick);
    unique.insert(pick->id);
    ids.push_back(pick->id);
    history.push_back({pick->id, pick_score});
    best = pick_score;
  }
  EnsembleSelection sel = EnsembleSelection::from_sequence(std::move(ids));
  sel.history = std::move(history);
  sel.score = best;
  return sel;
}

EnsembleSelection top_k_select(const std::vector<ModelRecord>& records, std::span<const std::size_t> labels,
                               std::size_t K) {
  auto ok = ok_by_id(records, labels);
  if (K == 0 || ok.size() < K)
    throw std::invalid_argument("top_k_select: need " + std::to_string(K) + " successful records, have " +
                                std::to_string(ok.size()));
  std::vector<std::pair<double, const ModelRecord*>> scored;
  for (const ModelRecord* r : ok) scored.emplace_back(ensemble_score({r}, labels), r);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> ids;
  std::vector<const ModelRecord*> members;
  for (std::size_t i = 0; i < K; ++i) {
    ids.push_back(scored[i].second->id);
    members.push_back(scored[i].second);
  }
  EnsembleSelection sel = EnsembleSelection::from_sequence(std::move(ids));
  sel.score = ensemble_score(members, labels);
  return sel;
}

EnsembleSelection deep_ens(const std::vector<ModelRecord>& records, const HyperVector& lambda,
                           std::span<const std::size_t> labels, std::size_t K) {
  auto ok = ok_by_id(records, labels);
  std::vector<const ModelRecord*> column;
  for (const ModelRecord* r : ok)
    if (r->lambda == lambda && column.size() < K) column.push_back(r);
  if (K == 0 || column.size() < K)
    throw std::invalid_argument("deep_ens: found " + std::to_string(column.size()) + " records for the requested lambda, need " +
                                std::to_string(K));
  std::vector<std::size_t> ids;
  for (const ModelRecord* r : column) ids.push_back(r->id);
  EnsembleSelection sel = EnsembleSelection::from_sequence(std::move(ids));
  sel.score = ensemble_score(column, labels);
  return sel;
}

EnsembleSelection fixed_init_hyper_ens(const std::vector<ModelRecord>& records, std::uint64_t init_seed,
                                       std::span<const std::size_t> labels, std::size_t K) {
  std::vector<ModelRecord> row;
  for (const auto& r : records)
    if (r.init_seed == init_seed) row.push_back(r);
  if (row.empty()) throw std::invalid_argument("fixed_init_hyper_ens: no records with init seed " + std::to_string(init_seed));
  return hyper_ens(row, labels, K);
}

MetricReport selection_metrics(const std::vector<ModelRecord>& records, const EnsembleSelection& sel,
                               std::span<const std::size_t> labels, bool test, std::size_t n_bins) {
  if (sel.sequence.empty()) throw std::invalid_argument("selection_metrics: empty selection");
  auto probs = [&](std::size_t id) -> const Tensor& {
    const ModelRecord& r = find_record(records, id);
    const Tensor& t = test ? r.test_predictions : r.val_predictions;
    if (t.rank() != 2 || t.dim(0) != labels.size())
      throw ShapeError("record " + std::to_string(id) + ": no predictions for this split");
    return t;
  };
  const Tensor& first = probs(sel.sequence[0]);
  Tensor avg(first.shape());
  for (std::size_t id : sel.sequence) {
    const Tensor& p = probs(id);
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += p[i];
  }
  for (double& v : avg.data()) v /= double(sel.sequence.size());
  MetricReport rep;
  auto basic = basic_metrics(avg, labels);
  rep.nll = basic.nll;
  rep.accuracy = basic.accuracy;
  rep.brier = basic.brier;
  auto e = ece(avg, labels, n_bins);
  rep.ece = e.ece;
  rep.bins = std::move(e.bins);
  rep.n = labels.size();
  if (sel.members.size() >= 2) {
    std::vector<std::vector<std::size_t>> preds;
    for (const auto& [id, mult] : sel.members) preds.push_back(argmax_rows(probs(id)));
    rep.diversity = diversity(preds, rep.accuracy);
  }
  return rep;
}

json selection_to_json(const EnsembleSelection& sel) {
  json members = json::array(), history = json::array();
  for (const auto& [id, mult] : sel.members) members.push_back({{"id", id}, {"multiplicity", mult}});
  for (const auto& s : sel.history) history.push_back({{"id", s.id}, {"score", s.score}});
  return {{"sequence", sel.sequence}, {"members", members}, {"history", history}, {"score", sel.score},
          {"unique", sel.unique()}};
}

// ---------------------------------------------------------------------------
// Search

ModelRecord run_trial(const SearchContext& ctx, std::size_t id, const std::string& stage, const HyperVector& lambda,
                      std::uint64_t init_seed) {
  if (!ctx.train || !ctx.val) throw std::invalid_argument("search: training and validation data are required");
  if (ctx.loss.task != Task::classification) throw std::invalid_argument("search: ensemble selection needs a classification task");
  ModelRecord rec;
  rec.id = id;
  rec.stage = stage;
  rec.lambda = lambda;
  rec.init_seed = init_seed;
  TrainedModel m = train_fixed(ctx.spec, ctx.schema, lambda, ctx.plan, ctx.loss, {*ctx.train, *ctx.val}, init_seed);
  rec.ok = m.ok;
  if (m.ok) {
    std::vector<HyperVector> lam{lambda};
    Tensor val = predict_members(*m.net, ctx.val->features, lam, true);
    rec.val_predictions = val.reshaped({val.dim(1), val.dim(2)});
    if (!rec.val_predictions.all_finite()) {
      rec.ok = false;
      rec.failure = "non-finite validation predictions";
    }
  } else {
    rec.failure = m.failure;
  }
  if (rec.ok) {
    if (ctx.test) {
      std::vector<HyperVector> lam{lambda};
      Tensor t = predict_members(*m.net, ctx.test->features, lam, true);
      rec.test_predictions = t.reshaped({t.dim(1), t.dim(2)});
    }
    rec.val_nll = ensemble_score({&rec}, ctx.val->labels);
    rec.val_accuracy = basic_metrics(rec.val_predictions, ctx.val->labels).accuracy;
  } else {
    rec.val_nll = kInf;
    rec.val_predictions = Tensor();
  }
  if (!ctx.out_dir.empty()) {
    if (rec.ok) {
      rec.predictions = prediction_name(stage, id);
      NamedArrays preds{{"val", rec.val_predictions}};
      if (ctx.test) preds.emplace_back("test", rec.test_predictions);
      save_checkpoint(ctx.out_dir / rec.predictions, preds);
      if (ctx.save_checkpoints) {
        rec.checkpoint = "ckpt/" + stage + "_" + std::to_string(id) + ".bin";
        auto state = m.net->export_state();
        state.emplace_back("lambda", Tensor({lambda.size()}, lambda));
        save_checkpoint(ctx.out_dir / rec.checkpoint, state);
      }
    }
    json j = record_to_json(rec);
    j["type"] = "model";
    append_record(ctx.out_dir / "ledger.jsonl", j);
  }
  return rec;
}

namespace {

std::vector<ModelRecord> run_pending(const SearchContext& ctx, const std::string& stage,
                                     const std::vector<std::size_t>& ids,
                                     const std::function<std::pair<HyperVector, std::uint64_t>(std::size_t)>& plan_of) {
  std::map<std::size_t, ModelRecord> done;
  if (!ctx.out_dir.empty())
    for (auto& r : load_records(ctx.out_dir, stage)) done.emplace(r.id, std::move(r));
  std::vector<std::size_t> pending;
  for (std::size_t id : ids)
    if (!done.count(id)) pending.push_back(id);
  std::vector<ModelRecord> fresh(pending.size());
  parallel_for(pending.size(), ctx.workers, [&](std::size_t i) {
    auto [lambda, seed] = plan_of(pending[i]);
    fresh[i] = run_trial(ctx, pending[i], stage, lambda, seed);
  });
  for (auto& r : fresh) done[r.id] = std::move(r);
  std::vector<ModelRecord> out;
  for (std::size_t id : ids) out.push_back(done.at(id));
  return out;
}

}  // namespace

std::vector<ModelRecord> rand_search(const SearchContext& ctx, std::size_t kappa, std::uint64_t seed) {
  if (kappa == 0) throw std::invalid_argument("rand_search: kappa must be at least 1");
  const MemberDistribution global = initial_distribution(ctx.schema);
  std::vector<std::size_t> ids(kappa);
  for (std::size_t i = 0; i < kappa; ++i) ids[i] = i;
  return run_pending(ctx, "search", ids, [&](std::size_t id) {
    Rng lam_rng = Rng(seed).derive(id, "lambda");
    HyperVector lambda = ctx.schema.size() ? sample(global, lam_rng) : HyperVector{};
    return std::pair{lambda, Rng(seed).derive(id, "init_seed").next_u64()};
  });
}

std::vector<ModelRecord> stratify(const SearchContext& ctx, const std::vector<ModelRecord>& search,
                                  const EnsembleSelection& initial, std::size_t K, std::uint64_t seed,
                                  bool reuse_originals, std::size_t first_id) {
  if (K == 0) throw std::invalid_argument("stratify: K must be at least 1");
  std::vector<ModelRecord> grid;
  std::vector<std::size_t> to_train;
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> cell;  // grid id -> (source id, column)
  for (std::size_t r = 0; r < initial.members.size(); ++r) {
    const ModelRecord& src = find_record(search, initial.members[r].first);
    for (std::size_t c = 0; c < K; ++c) {
      const std::size_t id = first_id + r * K + c;
      cell[id] = {src.id, c};
      if (reuse_originals && c == 0) continue;
      to_train.push_back(id);
    }
  }
  auto trained = run_pending(ctx, "stratify", to_train, [&](std::size_t id) {
    const ModelRecord& src = find_record(search, cell.at(id).first);
    // Columns share an init seed, so each column with a fixed seed is a fixed-init row of the grid.
    return std::pair{src.lambda, Rng(seed).derive(cell.at(id).second, "stratify_init").next_u64()};
  });
  std::map<std::size_t, ModelRecord> by_id;
  for (auto& r : trained) by_id[r.id] = std::move(r);
  for (const auto& [id, pos] : cell) {
    ModelRecord rec;
    if (reuse_originals && pos.second == 0) {
      rec = find_record(search, pos.first);
      rec.id = id;
      rec.stage = "stratify";
    } else {
      rec = by_id.at(id);
    }
    rec.row = pos.first;
    rec.column = pos.second;
    grid.push_back(std::move(rec));
  }
  return grid;
}

HyperDeepResult hyper_deep_ens(const SearchContext& ctx, std::size_t K, std::size_t kappa, std::uint64_t seed,
                               bool reuse_originals) {
  if (K == 0 || kappa < K) throw std::invalid_argument("hyper_deep_ens: need 1 <= K <= kappa");
  HyperDeepResult res;
  res.search = rand_search(ctx, kappa, seed);
  res.initial = hyper_ens(res.search, ctx.val->labels, K);
  res.grid = stratify(ctx, res.search, res.initial, K, seed, reuse_originals, kappa);
  res.final = hyper_ens(res.grid, ctx.val->labels, K);
  return res;
}

}  // namespace hyperens
