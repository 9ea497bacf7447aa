#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "hyperens/experiment.hpp"
#include "hyperens/selection.hpp"

namespace hyperens {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> kappa, k, workers;
  std::vector<std::string> sets;
  std::string stage = "search";
  std::string from = "search";
};

/// Everything a command needs: the parsed config, its data and the output root.
struct Env {
  ExperimentConfig cfg;
  fs::path out;
  std::ostream* log = nullptr;
  std::optional<DataSplit> data;

  DataSplit& split() {
    if (!data) data = load_data(cfg);
    return *data;
  }
};

bool is_classification(const Env& env) { return env.cfg.loss.task == Task::classification; }

std::string lambda_column(const HyperSchema& schema, std::size_t i) { return "lambda_" + schema[i].name; }

json lambda_json(const HyperSchema& schema, const HyperVector& lambda) {
  json j = json::object();
  for (std::size_t i = 0; i < schema.size() && i < lambda.size(); ++i) j[schema[i].name] = lambda[i];
  return j;
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error(path.string() + ": not valid JSON");
  return j;
}

const json* find_path(const json& root, const std::string& path) {
  const json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &node->at(part);
    if (dot == std::string::npos) return node;
    start = dot + 1;
  }
}

/// First differing leaf key between two trees, or empty.
std::string first_difference(const json& a, const json& b, const std::string& prefix) {
  if (a.is_object() && b.is_object()) {
    for (const auto& [key, value] : a.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      if (!b.contains(key)) return path;
      auto d = first_difference(value, b.at(key), path);
      if (!d.empty()) return d;
    }
    for (const auto& [key, value] : b.items())
      if (!a.contains(key)) return prefix.empty() ? key : prefix + "." + key;
    return "";
  }
  return a == b ? "" : prefix;
}

/// The output directory remembers, per result group (search, train,
/// hyper_batch, bestresponse), the config sections that group was built with
/// (out/config.json). A later command touching the group must agree with
/// them, otherwise resumed results would mix two experiments. With
/// `record` false the sections are only checked.
void claim_sections(Env& env, const std::string& group, const std::vector<std::string>& sections, bool record = true) {
  const fs::path path = env.out / "config.json";
  json stored = fs::exists(path) ? read_json(path) : json::object();
  if (!stored.contains(group) && !record) return;
  json& claims = stored[group];
  if (claims.is_null()) claims = json::object();
  bool changed = false;
  for (const auto& s : sections) {
    const json* now = find_path(env.cfg.raw, s);
    if (!now) continue;
    if (claims.contains(s)) {
      auto diff = first_difference(claims[s], *now, s);
      if (!diff.empty())
        throw ConfigError(diff, "differs from the value the " + group + " results in this output directory were built with (" +
                                    path.string() + "); use a fresh --out");
    } else if (record) {
      claims[s] = *now;
      changed = true;
    }
  }
  if (changed) write_json(path, stored);
}

const std::vector<std::string> kModelSections{"seed", "task", "data", "model", "hypers", "train", "loss"};

Tensor lambda_rows(const std::vector<HyperVector>& lambda, std::size_t m) {
  Tensor t({lambda.size(), m});
  for (std::size_t k = 0; k < lambda.size(); ++k)
    for (std::size_t i = 0; i < m; ++i) t.at(k, i) = lambda[k][i];
  return t;
}

std::vector<HyperVector> lambda_vectors(const Tensor& t) {
  std::vector<HyperVector> out(t.dim(0));
  for (std::size_t k = 0; k < t.dim(0); ++k)
    for (std::size_t i = 0; i < t.dim(1); ++i) out[k].push_back(t.at(k, i));
  return out;
}

double member_mse(const Tensor& preds, std::span<const double> targets) {
  const std::size_t K = preds.dim(0), n = preds.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t k = 0; k < K; ++k) mean += preds[(k * n + i) * preds.dim(2)];
    mean /= static_cast<double>(K);
    total += (mean - targets[i]) * (mean - targets[i]);
  }
  return total / static_cast<double>(n);
}

/// Metrics of member outputs [K, n, C] on one split.
json split_report(const Env& env, const Tensor& preds, const Dataset& d) {
  if (is_classification(env)) return metric_report_to_json(evaluate_members(preds, d.labels, env.cfg.bins));
  return {{"n", d.size()}, {"mse", member_mse(preds, d.targets)}};
}

void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& h : history)
    rows.push_back({std::to_string(h.epoch), format_double(h.train_loss), format_double(h.val_loss),
                    format_double(h.val_accuracy)});
  write_csv(path, {"epoch", "train_loss", "val_loss", "val_accuracy"}, rows);
}

// ---------------------------------------------------------------------------
// train / fit-hyper-batch

/// Saves checkpoint, predictions, history and metrics of a trained model into
/// dir; metrics.json is written last and marks the directory complete.
void save_trained(Env& env, const fs::path& dir, TrainedModel& m, json extra) {
  auto& split = env.split();
  const bool cls = is_classification(env);
  const std::size_t mdim = env.cfg.schema.size();
  auto state = m.net->export_state();
  state.emplace_back("lambda", lambda_rows(m.lambda, mdim));
  if (!m.distributions.empty()) {
    std::vector<HyperVector> lo, hi;
    for (const auto& d : m.distributions) {
      lo.push_back(d.lower);
      hi.push_back(d.upper);
    }
    state.emplace_back("dist/lower", lambda_rows(lo, mdim));
    state.emplace_back("dist/upper", lambda_rows(hi, mdim));
  }
  save_checkpoint(dir / "checkpoint.bin", state);
  Tensor val = predict_members(*m.net, split.val.features, m.lambda, cls);
  Tensor test = predict_members(*m.net, split.test.features, m.lambda, cls);
  save_checkpoint(dir / "predictions.bin", {{"val", val}, {"test", test}});
  write_history(dir / "history.csv", m.history);

  json members = json::array();
  for (const auto& l : m.lambda) members.push_back(lambda_json(env.cfg.schema, l));
  extra["lambda"] = members;
  extra["train_steps"] = m.train_steps;
  extra["tune_steps"] = m.tune_steps;
  extra["val"] = split_report(env, val, split.val);
  extra["test"] = split_report(env, test, split.test);
  write_json(dir / "metrics.json", extra);
}

int cmd_train(Env& env) {
  claim_sections(env, "train", kModelSections);
  const fs::path dir = env.out / "train";
  if (fs::exists(dir / "metrics.json")) {
    *env.log << "train: already complete in " << dir.string() << "\n";
    return 0;
  }
  fs::create_directories(dir);
  auto& split = env.split();
  HyperVector lambda = env.cfg.lambda;
  if (lambda.empty())
    for (const auto& d : env.cfg.schema.dims()) lambda.push_back(std::sqrt(d.lower * d.upper));
  TrainedModel m = train_fixed(env.cfg.spec, env.cfg.schema, lambda, env.cfg.plan, env.cfg.loss,
                               {split.train, split.val}, env.cfg.seed);
  if (!m.ok) throw std::runtime_error("train: " + m.failure);
  save_trained(env, dir, m, json::object());
  *env.log << "train: wrote " << dir.string() << "\n";
  return 0;
}

int cmd_fit_hyper_batch(Env& env) {
  claim_sections(env, "hyper_batch", kModelSections);
  const fs::path dir = env.out / "hyper_batch";
  if (fs::exists(dir / "metrics.json")) {
    *env.log << "fit-hyper-batch: already complete in " << dir.string() << "\n";
    return 0;
  }
  fs::create_directories(dir);
  auto& split = env.split();
  TrainedModel m = fit_hyper_batch(env.cfg.spec, env.cfg.schema, env.cfg.plan, env.cfg.loss,
                                   {split.train, split.val}, env.cfg.seed);
  if (!m.ok) throw std::runtime_error("fit-hyper-batch: " + m.failure);
  write_trajectory_csv(dir / "trajectory.csv", m.trajectory);
  json dists = json::array();
  for (const auto& d : m.distributions) {
    json lo = json::object(), hi = json::object();
    for (std::size_t i = 0; i < env.cfg.schema.size(); ++i) {
      lo[env.cfg.schema[i].name] = d.lower[i];
      hi[env.cfg.schema[i].name] = d.upper[i];
    }
    dists.push_back({{"lower", lo}, {"upper", hi}});
  }
  save_trained(env, dir, m, {{"distributions", dists}});
  *env.log << "fit-hyper-batch: wrote " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// search, stratification, selection

SearchContext search_context(Env& env) {
  if (!is_classification(env))
    throw ConfigError("task", "random search and ensemble selection need a classification task");
  auto& split = env.split();
  SearchContext ctx;
  ctx.spec = env.cfg.spec;
  ctx.schema = env.cfg.schema;
  ctx.plan = env.cfg.plan;
  ctx.loss = env.cfg.loss;
  ctx.train = &split.train;
  ctx.val = &split.val;
  ctx.test = &split.test;
  ctx.out_dir = env.out;
  ctx.workers = env.cfg.workers;
  ctx.save_checkpoints = env.cfg.save_checkpoints;
  return ctx;
}

void write_records_csv(const fs::path& path, const HyperSchema& schema, const std::vector<ModelRecord>& records,
                       const std::map<std::size_t, std::size_t>& multiplicity = {}) {
  std::vector<std::string> header{"id", "row", "column", "init_seed"};
  for (std::size_t i = 0; i < schema.size(); ++i) header.push_back(lambda_column(schema, i));
  for (const char* h : {"status", "val_nll", "val_accuracy", "selected"}) header.push_back(h);
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : records) {
    std::vector<std::string> row{std::to_string(r.id), r.row ? std::to_string(*r.row) : "",
                                 r.column ? std::to_string(*r.column) : "", std::to_string(r.init_seed)};
    for (double v : r.lambda) row.push_back(format_double(v));
    row.push_back(r.ok ? "ok" : "failed");
    row.push_back(r.ok ? format_double(r.val_nll) : "");
    row.push_back(r.ok ? format_double(r.val_accuracy) : "");
    auto it = multiplicity.find(r.id);
    row.push_back(std::to_string(it == multiplicity.end() ? 0 : it->second));
    rows.push_back(std::move(row));
  }
  write_csv(path, header, rows);
}

std::map<std::size_t, std::size_t> multiplicities(const EnsembleSelection& sel) {
  return {sel.members.begin(), sel.members.end()};
}

std::vector<ModelRecord> search_records(Env& env) {
  auto records = load_records(env.out, "search");
  if (records.empty())
    throw std::runtime_error("no search records in " + (env.out / "ledger.jsonl").string() +
                             "; run random-search first");
  return records;
}

int cmd_random_search(Env& env) {
  claim_sections(env, "search", kModelSections);
  SearchContext ctx = search_context(env);
  auto records = rand_search(ctx, env.cfg.kappa, env.cfg.seed);
  write_records_csv(env.out / "search.csv", env.cfg.schema, records);
  const auto ok = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.ok; });
  *env.log << "random-search: " << records.size() << " records (" << ok << " ok) in "
           << (env.out / "ledger.jsonl").string() << "\n";
  return 0;
}

/// The stratified grid: trained cells come from the ledger, reused cells are
/// copies of their search record. Layout lives in grid.json.
std::vector<ModelRecord> load_grid(Env& env, const std::vector<ModelRecord>& search) {
  const fs::path path = env.out / "grid.json";
  if (!fs::exists(path)) throw std::runtime_error("no stratified grid in " + env.out.string() + "; run stratify first");
  const json layout = read_json(path);
  auto trained = load_records(env.out, "stratify");
  std::map<std::size_t, const ModelRecord*> by_id, search_by_id;
  for (const auto& r : trained) by_id[r.id] = &r;
  for (const auto& r : search) search_by_id[r.id] = &r;
  std::vector<ModelRecord> grid;
  for (const auto& cell : layout.at("cells")) {
    const std::size_t id = cell.at("id"), row = cell.at("row"), column = cell.at("column");
    ModelRecord rec;
    if (cell.at("reused").get<bool>()) {
      auto it = search_by_id.find(row);
      if (it == search_by_id.end()) throw std::runtime_error("record " + std::to_string(row) + ": missing search record");
      rec = *it->second;
      rec.id = id;
      rec.stage = "stratify";
    } else {
      auto it = by_id.find(id);
      if (it == by_id.end())
        throw std::runtime_error("record " + std::to_string(id) + ": grid cell not trained; rerun stratify");
      rec = *it->second;
    }
    rec.row = row;
    rec.column = column;
    grid.push_back(std::move(rec));
  }
  return grid;
}

int cmd_stratify(Env& env) {
  claim_sections(env, "search", kModelSections);
  SearchContext ctx = search_context(env);
  auto search = search_records(env);
  const auto& labels = env.split().val.labels;
  const std::size_t K = env.cfg.k;
  EnsembleSelection initial = hyper_ens(search, labels, K);
  const std::size_t first_id = search.back().id + 1;

  json layout{{"k", K}, {"reuse_originals", env.cfg.reuse_originals}, {"initial", initial.sequence}};
  const fs::path grid_path = env.out / "grid.json";
  std::size_t start = first_id;
  if (fs::exists(grid_path)) {
    const json old = read_json(grid_path);
    if (old.at("k") != layout["k"]) throw ConfigError("search.k", "differs from the existing grid; use a fresh --out");
    if (old.at("reuse_originals") != layout["reuse_originals"])
      throw ConfigError("search.reuse_originals", "differs from the existing grid; use a fresh --out");
    if (old.at("initial") != layout["initial"])
      throw std::runtime_error("the search records changed since the grid was built; use a fresh --out");
    start = old.at("first_id").get<std::size_t>();
  }
  auto grid = stratify(ctx, search, initial, K, env.cfg.seed, env.cfg.reuse_originals, start);
  layout["first_id"] = start;
  json cells = json::array();
  for (const auto& r : grid)
    cells.push_back({{"id", r.id},
                     {"row", *r.row},
                     {"column", *r.column},
                     {"reused", env.cfg.reuse_originals && *r.column == 0}});
  layout["cells"] = cells;
  write_json(grid_path, layout);

  json init = selection_to_json(initial);
  init["k"] = K;
  write_json(env.out / "initial_selection.json", init);
  write_records_csv(env.out / "grid.csv", env.cfg.schema, grid);
  *env.log << "stratify: " << initial.unique() << " rows x " << K << " columns, " << grid.size() << " cells\n";
  return 0;
}

std::vector<ModelRecord> stage_records(Env& env, const std::string& stage) {
  if (stage == "search") return search_records(env);
  if (stage == "stratify") return load_grid(env, search_records(env));
  throw ConfigError("--stage", "expected search or stratify, got '" + stage + "'");
}

void write_trace(const fs::path& path, const EnsembleSelection& sel) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < sel.history.size(); ++i)
    rows.push_back({std::to_string(i + 1), std::to_string(sel.history[i].id), format_double(sel.history[i].score)});
  write_csv(path, {"step", "id", "score"}, rows);
}

int cmd_select(Env& env, const std::string& stage) {
  claim_sections(env, "search", kModelSections);
  if (!is_classification(env)) throw ConfigError("task", "ensemble selection needs a classification task");
  auto records = stage_records(env, stage);
  auto& split = env.split();
  EnsembleSelection sel = hyper_ens(records, split.val.labels, env.cfg.k);
  json j = selection_to_json(sel);
  j["stage"] = stage;
  j["k"] = env.cfg.k;
  j["val"] = metric_report_to_json(selection_metrics(records, sel, split.val.labels, false, env.cfg.bins));
  const bool has_test = std::all_of(sel.members.begin(), sel.members.end(), [&](const auto& m) {
    return std::any_of(records.begin(), records.end(),
                       [&](const auto& r) { return r.id == m.first && !r.test_predictions.empty(); });
  });
  if (has_test)
    j["test"] = metric_report_to_json(selection_metrics(records, sel, split.test.labels, true, env.cfg.bins));
  write_json(env.out / ("selection_" + stage + ".json"), j);
  write_trace(env.out / ("selection_" + stage + "_trace.csv"), sel);
  *env.log << "select: " << sel.length() << " members (" << sel.unique() << " unique), val nll "
           << format_double(sel.score) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate / ood-eval

struct LoadedModel {
  std::unique_ptr<Network> net;
  std::vector<HyperVector> lambda;
};

LoadedModel load_model(Env& env, const fs::path& ckpt, const ModelSpec& spec) {
  if (!fs::exists(ckpt)) throw std::runtime_error(ckpt.string() + ": checkpoint not found");
  auto arrays = load_checkpoint(ckpt);
  LoadedModel m;
  m.net = std::make_unique<Network>(spec, env.cfg.schema, Rng(0));
  m.net->import_state(arrays);
  const Tensor& lam = find_array(arrays, "lambda");
  m.lambda = lam.rank() == 1 ? std::vector<HyperVector>{HyperVector(lam.data())} : lambda_vectors(lam);
  return m;
}

const fs::path& model_dir_for(const std::string& from) {
  static const fs::path train = "train", hb = "hyper_batch";
  return from == "train" ? train : hb;
}

std::string group_of(const std::string& from) {
  return from == "train" || from == "hyper_batch" ? from : "search";
}

int cmd_evaluate(Env& env, const std::string& from) {
  claim_sections(env, group_of(from), kModelSections);
  auto& split = env.split();
  json j{{"from", from}};
  if (from == "train" || from == "hyper_batch") {
    const fs::path dir = env.out / model_dir_for(from);
    auto m = load_model(env, dir / "checkpoint.bin", env.cfg.spec);
    const bool cls = is_classification(env);
    j["val"] = split_report(env, predict_members(*m.net, split.val.features, m.lambda, cls), split.val);
    j["test"] = split_report(env, predict_members(*m.net, split.test.features, m.lambda, cls), split.test);
  } else {
    if (!is_classification(env)) throw ConfigError("task", "ensemble selection needs a classification task");
    auto records = stage_records(env, from);
    EnsembleSelection sel = hyper_ens(records, split.val.labels, env.cfg.k);
    j["selection"] = selection_to_json(sel);
    j["val"] = metric_report_to_json(selection_metrics(records, sel, split.val.labels, false, env.cfg.bins));
    j["test"] = metric_report_to_json(selection_metrics(records, sel, split.test.labels, true, env.cfg.bins));
  }
  write_json(env.out / ("evaluation_" + from + ".json"), j);
  *env.log << "evaluate: wrote " << (env.out / ("evaluation_" + from + ".json")).string() << "\n";
  return 0;
}

/// Averaged probabilities [n, C] of a model source on raw inputs.
Tensor source_probs(Env& env, const std::string& from, const Tensor& x) {
  if (from == "train" || from == "hyper_batch") {
    auto m = load_model(env, env.out / model_dir_for(from) / "checkpoint.bin", env.cfg.spec);
    return average_members(predict_members(*m.net, x, m.lambda, true));
  }
  auto records = stage_records(env, from);
  EnsembleSelection sel = hyper_ens(records, env.split().val.labels, env.cfg.k);
  Tensor sum;
  std::size_t count = 0;
  for (const auto& [id, mult] : sel.members) {
    const auto& rec = *std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.id == id; });
    if (rec.checkpoint.empty())
      throw std::runtime_error("record " + std::to_string(id) +
                               ": no checkpoint saved; rerun the search with search.save_checkpoints=true");
    auto m = load_model(env, env.out / rec.checkpoint, env.cfg.spec);
    Tensor p = average_members(predict_members(*m.net, x, m.lambda, true));
    if (sum.empty()) sum = Tensor(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) sum[i] += static_cast<double>(mult) * p[i];
    count += mult;
  }
  for (double& v : sum.data()) v /= static_cast<double>(count);
  return sum;
}

int cmd_ood_eval(Env& env, const std::string& from) {
  claim_sections(env, group_of(from), kModelSections);
  if (!is_classification(env)) throw ConfigError("task", "out-of-distribution metrics need a classification task");
  auto& split = env.split();
  Dataset ood = load_ood(env.cfg);
  Tensor in = source_probs(env, from, split.test.features);
  Tensor outp = source_probs(env, from, ood.features);
  OodMetrics om = ood_metrics(in, outp);
  double mmc_in = 0.0;
  for (std::size_t i = 0; i < in.dim(0); ++i) {
    double best = 0.0;
    for (std::size_t c = 0; c < in.dim(1); ++c) best = std::max(best, in.at(i, c));
    mmc_in += best;
  }
  mmc_in /= static_cast<double>(in.dim(0));
  json j{{"from", from},       {"n_in", in.dim(0)},     {"n_out", outp.dim(0)}, {"mmc_in", mmc_in},
         {"mmc_out", om.mmc_out}, {"auroc", om.auroc}, {"fpr95", om.fpr95}};
  write_json(env.out / ("ood_" + from + ".json"), j);
  *env.log << "ood-eval: auroc " << format_double(om.auroc) << ", fpr95 " << format_double(om.fpr95) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bestresponse

int cmd_bestresponse(Env& env) {
  claim_sections(env, "bestresponse", {"bestresponse"});
  const auto& br = env.cfg.bestresponse;
  const fs::path dir = env.out / "bestresponse";
  fs::create_directories(dir);
  const fs::path ledger = dir / "fits.jsonl";
  std::map<std::pair<std::uint64_t, std::size_t>, json> done;
  for (const auto& r : scan_records(ledger).records)
    if (r.contains("seed") && r.contains("h")) done[{r["seed"].get<std::uint64_t>(), r["h"].get<std::size_t>()}] = r;

  const auto grid = lambda_grid(br.lambda_lo, br.lambda_hi, br.grid);
  for (std::uint64_t seed : br.seeds) {
    RidgeProblem p = make_ridge_problem(br.n, br.k, seed, br.loss, br.spread, br.noise);
    p.lambda_lo = br.lambda_lo;
    p.lambda_hi = br.lambda_hi;
    for (std::size_t h : br.h) {
      const std::string name = "gap_seed" + std::to_string(seed) + "_h" + std::to_string(h) + ".csv";
      if (done.count({seed, h}) && fs::exists(dir / name)) continue;
      PolyEmbedding emb{h, br.lambda_lo, br.lambda_hi};
      Rng rng = Rng(seed).derive(h, "bestresponse");
      BrFit fit = fit_bestresponse(p, emb, br.fit, rng);
      GapReport gap = gap_report(fit.U, emb, p, grid);
      RegressionOracle oracle = regression_oracle(p, emb, grid);
      write_gap_csv(dir / name, gap);
      json rec{{"seed", seed},
               {"h", h},
               {"mean_sq_gap", gap.mean_sq_gap},
               {"mean_weighted_sq_gap", gap.mean_weighted_sq_gap},
               {"bound", oracle.bound},
               {"final_objective", fit.final_objective}};
      append_record(ledger, rec);
      done[{seed, h}] = rec;
    }
  }

  std::vector<std::vector<std::string>> rows;
  std::map<std::size_t, std::array<double, 4>> mean;
  for (std::uint64_t seed : br.seeds)
    for (std::size_t h : br.h) {
      const json& r = done.at({seed, h});
      const std::array<double, 4> v{r["mean_sq_gap"].get<double>(), r["mean_weighted_sq_gap"].get<double>(),
                                    r["bound"].get<double>(), r["final_objective"].get<double>()};
      rows.push_back({std::to_string(seed), std::to_string(h), format_double(v[0]), format_double(v[1]),
                      format_double(v[2]), format_double(v[3]), v[1] <= 2.0 * v[2] ? "1" : "0"});
      for (int i = 0; i < 4; ++i) mean[h][i] += v[i] / static_cast<double>(br.seeds.size());
    }
  for (std::size_t h : br.h) {
    const auto& v = mean[h];
    rows.push_back({"mean", std::to_string(h), format_double(v[0]), format_double(v[1]), format_double(v[2]),
                    format_double(v[3]), v[1] <= 2.0 * v[2] ? "1" : "0"});
  }
  write_csv(dir / "summary.csv",
            {"seed", "h", "mean_sq_gap", "mean_weighted_sq_gap", "bound", "final_objective", "within_2x_bound"}, rows);
  *env.log << "bestresponse: " << br.seeds.size() * br.h.size() << " fits, summary in "
           << (dir / "summary.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report

struct ComparisonRow {
  std::string method;
  std::size_t members = 0, unique = 0;
  MetricReport val, test;
};

std::string opt_string(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

int cmd_report(Env& env) {
  for (const char* group : {"search", "train", "hyper_batch"}) claim_sections(env, group, {"task", "data"}, false);
  const fs::path dir = env.out / "report";
  fs::create_directories(dir);
  auto& split = env.split();
  const std::size_t K = env.cfg.k, bins = env.cfg.bins;
  const bool cls = is_classification(env);
  std::vector<ComparisonRow> rows;
  std::size_t written = 0;

  auto add_selection = [&](const std::string& method, const std::vector<ModelRecord>& records,
                           const EnsembleSelection& sel) {
    rows.push_back({method, sel.length(), sel.unique(), selection_metrics(records, sel, split.val.labels, false, bins),
                    selection_metrics(records, sel, split.test.labels, true, bins)});
  };
  auto add_model = [&](const std::string& method, const fs::path& preds_path) {
    if (!fs::exists(preds_path)) return;
    auto arrays = load_checkpoint(preds_path);
    const Tensor& val = find_array(arrays, "val");
    const Tensor& test = find_array(arrays, "test");
    rows.push_back({method, val.dim(0), val.dim(0), evaluate_members(val, split.val.labels, bins),
                    evaluate_members(test, split.test.labels, bins)});
  };

  if (cls) {
    auto search = load_records(env.out, "search");
    const bool have_search = std::any_of(search.begin(), search.end(), [](const auto& r) { return r.ok; });
    if (have_search) {
      add_selection("best_single", search, top_k_select(search, split.val.labels, 1));
      const auto ok = std::count_if(search.begin(), search.end(), [](const auto& r) { return r.ok; });
      if (static_cast<std::size_t>(ok) >= K) add_selection("top_k", search, top_k_select(search, split.val.labels, K));
      add_selection("hyper_ens", search, hyper_ens(search, split.val.labels, K));
    }
    if (have_search && fs::exists(env.out / "grid.json")) {
      auto grid = load_grid(env, search);
      const json layout = read_json(env.out / "grid.json");
      const std::size_t gk = layout.at("k");
      EnsembleSelection final_sel = hyper_ens(grid, split.val.labels, K);
      add_selection("hyper_deep_ens", grid, final_sel);
      const ModelRecord& best =
          *std::find_if(search.begin(), search.end(),
                        [&](const auto& r) { return r.id == top_k_select(search, split.val.labels, 1).sequence[0]; });
      try {
        add_selection("deep_ens", grid, deep_ens(grid, best.lambda, split.val.labels, std::min(K, gk)));
      } catch (const std::invalid_argument& e) {
        *env.log << "report: deep_ens skipped: " << e.what() << "\n";
      }
      // The last grid column is retrained from one shared seed unless it holds the originals.
      const std::size_t column = gk - 1;
      if (!(layout.at("reuse_originals").get<bool>() && column == 0)) {
        auto it = std::find_if(grid.begin(), grid.end(), [&](const auto& r) { return r.column == column && r.ok; });
        if (it != grid.end())
          add_selection("fixed_init_hyper_ens", grid, fixed_init_hyper_ens(grid, it->init_seed, split.val.labels, K));
      }
      write_records_csv(dir / "grid.csv", env.cfg.schema, grid, multiplicities(final_sel));
      ++written;
    }
    add_model("hyper_batch", env.out / "hyper_batch" / "predictions.bin");
    add_model("single_fixed", env.out / "train" / "predictions.bin");

    if (!rows.empty()) {
      std::vector<std::vector<std::string>> out;
      for (const auto& r : rows)
        for (const auto& [name, m] : {std::pair<std::string, const MetricReport*>{"val", &r.val}, {"test", &r.test}})
          out.push_back({r.method, name, std::to_string(r.members), std::to_string(r.unique), format_double(m->nll),
                         format_double(m->accuracy), format_double(m->ece), format_double(m->brier),
                         opt_string(m->diversity)});
      write_csv(dir / "comparison.csv",
                {"method", "split", "members", "unique", "nll", "acc", "ece", "brier", "diversity"}, out);
      ++written;
    }
  } else {
    std::vector<std::vector<std::string>> out;
    for (const auto& [method, sub] : {std::pair<std::string, std::string>{"hyper_batch", "hyper_batch"},
                                      {"single_fixed", "train"}}) {
      const fs::path p = env.out / sub / "predictions.bin";
      if (!fs::exists(p)) continue;
      auto arrays = load_checkpoint(p);
      out.push_back({method, "val", format_double(member_mse(find_array(arrays, "val"), split.val.targets))});
      out.push_back({method, "test", format_double(member_mse(find_array(arrays, "test"), split.test.targets))});
    }
    if (!out.empty()) {
      write_csv(dir / "comparison.csv", {"method", "split", "mse"}, out);
      ++written;
    }
  }

  if (fs::exists(env.out / "hyper_batch" / "trajectory.csv")) {
    fs::copy_file(env.out / "hyper_batch" / "trajectory.csv", dir / "trajectory.csv",
                  fs::copy_options::overwrite_existing);
    ++written;
  }
  const fs::path br_summary = env.out / "bestresponse" / "summary.csv";
  if (fs::exists(br_summary)) {
    std::vector<std::vector<std::string>> out;
    for (const auto& entry : fs::directory_iterator(env.out / "bestresponse")) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("gap_seed", 0) != 0) continue;
      const auto h_pos = name.find("_h");
      const std::string seed = name.substr(8, h_pos - 8);
      const std::string h = name.substr(h_pos + 2, name.size() - h_pos - 6);
      std::ifstream in(entry.path());
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      auto csv = parse_csv(text);
      for (std::size_t i = 1; i < csv.size(); ++i) {
        std::vector<std::string> row{seed, h};
        row.insert(row.end(), csv[i].begin(), csv[i].end());
        out.push_back(std::move(row));
      }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      const auto ka = std::make_tuple(std::stoull(a[0]), std::stoull(a[1]), std::stod(a[2]));
      const auto kb = std::make_tuple(std::stoull(b[0]), std::stoull(b[1]), std::stod(b[2]));
      return ka < kb;
    });
    write_csv(dir / "bestresponse_gap.csv", {"seed", "h", "lambda0", "gap", "gap_sqrt_lambda0"}, out);
    fs::copy_file(br_summary, dir / "bestresponse_summary.csv", fs::copy_options::overwrite_existing);
    written += 2;
  }
  if (written == 0) throw std::runtime_error("report: nothing to report in " + env.out.string());
  *env.log << "report: " << written << " files in " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "output directory (default: $HYPERENS_OUT or hyperens_out)");
  cmd->add_option("--seed", o.seed, "experiment seed (config key seed)");
  cmd->add_option("--kappa", o.kappa, "random-search trials (search.kappa)");
  cmd->add_option("--k", o.k, "ensemble size (search.k)");
  cmd->add_option("--workers", o.workers, "parallel trials (search.workers)");
  cmd->add_option("--set", o.sets, "override a config value, key.path=value (repeatable)");
}

Env make_env(const Options& o, std::ostream& log) {
  std::vector<std::string> overrides = o.sets;
  if (o.seed) overrides.push_back("seed=" + std::to_string(*o.seed));
  if (o.kappa) overrides.push_back("search.kappa=" + std::to_string(*o.kappa));
  if (o.k) overrides.push_back("search.k=" + std::to_string(*o.k));
  if (o.workers) overrides.push_back("search.workers=" + std::to_string(*o.workers));
  Env env;
  env.cfg = parse_experiment(load_config(default_config(), o.config, overrides));
  if (!o.out.empty()) env.out = o.out;
  else if (const char* e = std::getenv("HYPERENS_OUT"); e && *e) env.out = e;
  else env.out = "hyperens_out";
  fs::create_directories(env.out);
  env.log = &log;
  return env;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hyperparameter ensembles: hyper-deep and hyper-batch ensembles"};
  app.require_subcommand(1);
  Options o;
  std::map<std::string, CLI::App*> cmds;
  const std::vector<std::pair<std::string, std::string>> names{
      {"train", "train one model at a fixed lambda"},
      {"fit-hyper-batch", "fit a hyper-batch ensemble"},
      {"random-search", "train kappa models at random lambda values"},
      {"stratify", "greedy selection over the search, then K init seeds per selected lambda"},
      {"select", "greedy ensemble selection over recorded models"},
      {"evaluate", "validation and test metrics of a trained model or selection"},
      {"ood-eval", "out-of-distribution detection metrics"},
      {"bestresponse", "best-response approximation experiment on ridge problems"},
      {"report", "comparison tables and trajectory CSVs"}};
  for (const auto& [name, help] : names) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, o);
    cmds[name] = cmd;
  }
  cmds["select"]->add_option("--stage", o.stage, "search or stratify")->check(CLI::IsMember({"search", "stratify"}));
  for (const char* c : {"evaluate", "ood-eval"})
    cmds[c]
        ->add_option("--from", o.from, "train, hyper_batch, search or stratify")
        ->check(CLI::IsMember({"train", "hyper_batch", "search", "stratify"}));

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    Env env = make_env(o, out);
    if (cmds["train"]->parsed()) return cmd_train(env);
    if (cmds["fit-hyper-batch"]->parsed()) return cmd_fit_hyper_batch(env);
    if (cmds["random-search"]->parsed()) return cmd_random_search(env);
    if (cmds["stratify"]->parsed()) return cmd_stratify(env);
    if (cmds["select"]->parsed()) return cmd_select(env, o.stage);
    if (cmds["evaluate"]->parsed()) return cmd_evaluate(env, o.from);
    if (cmds["ood-eval"]->parsed()) return cmd_ood_eval(env, o.from);
    if (cmds["bestresponse"]->parsed()) return cmd_bestresponse(env);
    if (cmds["report"]->parsed()) return cmd_report(env);
    return 1;
  } catch (const ConfigError& e) {
    err << "error: config key " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace hyperens
