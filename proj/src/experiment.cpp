#include "hyperens/experiment.hpp"

#include <cmath>

namespace hyperens {

json default_config() {
  return json::parse(R"({
    "seed": 0,
    "task": "classification",
    "data": {
      "source": "synth", "kind": "two_gaussians", "n": 1000, "seed": 0,
      "separation": 3.0, "nuisance_dims": 8, "regime_dims": 4, "noise": 1.0,
      "path": "", "labels_path": "", "target": "label",
      "val_fraction": 0.2, "test_fraction": 0.2
    },
    "model": {
      "hidden": [32], "conv": [], "kind": "plain", "members": 1, "bias": true,
      "rank1_init": "normal_050", "couple_uv_to_rs": false, "regularize_rank1": true,
      "train_rank1": true, "embedding": "linear", "embedding_init": "random"
    },
    "hypers": [
      {"name": "l2", "kind": "l2", "lower": 1e-5, "upper": 1e-1, "part": "both", "layer": -1}
    ],
    "train": {
      "epochs": 20, "batch_size": 64, "warmup_epochs": 5, "train_steps_per_tune": 2,
      "val_batch_size": 0, "optimizer": "adam", "lr": 1e-3, "momentum": 0.9,
      "tune_optimizer": "adam", "tune_lr": 5e-4, "tune_bounds": true,
      "shrink_initial_l2": false, "eval_each_epoch": true, "lambda": null
    },
    "loss": {"tau": 1e-3, "label_smoothing": 0.0},
    "search": {"kappa": 20, "k": 3, "reuse_originals": true, "workers": 1, "save_checkpoints": false},
    "ood": {
      "source": "noise", "scale": 5.0, "n": 500, "kind": "ring", "seed": 1,
      "path": "", "labels_path": "", "target": "label"
    },
    "bestresponse": {
      "n": 200, "k": 5, "loss": "square", "lambda_lo": 0.1, "lambda_hi": 1.0,
      "spread": 0.05, "noise": 0.5, "h": [1, 2, 4], "seeds": [0, 1, 2],
      "steps": 3000, "lambda_batch": 16, "lr": 0.05, "grid": 64
    },
    "report": {"bins": 15}
  })");
}

namespace {

const json& at(const json& cfg, const std::string& path) {
  const json* node = &cfg;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError(path, "missing key");
    node = &node->at(part);
    if (dot == std::string::npos) return *node;
    start = dot + 1;
  }
}

template <class T>
T get(const json& cfg, const std::string& path) {
  try {
    return at(cfg, path).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path, e.what());
  }
}

std::size_t get_size(const json& cfg, const std::string& path) {
  const json& v = at(cfg, path);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError(path, "expected a nonnegative integer");
  return v.get<std::size_t>();
}

std::size_t get_positive(const json& cfg, const std::string& path) {
  const std::size_t v = get_size(cfg, path);
  if (v == 0) throw ConfigError(path, "must be positive");
  return v;
}

template <class F>
auto parse_key(const std::string& key, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

OptimizerConfig optimizer(const json& cfg, const std::string& kind_key, const std::string& lr_key) {
  OptimizerConfig o;
  const auto kind = get<std::string>(cfg, kind_key);
  if (kind == "adam") o.kind = OptimizerKind::adam;
  else if (kind == "sgd") o.kind = OptimizerKind::sgd_momentum;
  else if (kind == "nesterov") {
    o.kind = OptimizerKind::sgd_momentum;
    o.nesterov = true;
  } else {
    throw ConfigError(kind_key, "unknown optimizer '" + kind + "' (expected adam, sgd or nesterov)");
  }
  o.learning_rate = get<double>(cfg, lr_key);
  if (!(o.learning_rate >= 0.0)) throw ConfigError(lr_key, "must be nonnegative");
  o.momentum = get<double>(cfg, "train.momentum");
  return o;
}

HyperSchema parse_schema(const json& cfg) {
  const json& list = at(cfg, "hypers");
  if (!list.is_array()) throw ConfigError("hypers", "expected an array");
  const json element = default_config()["hypers"][0];
  std::vector<HyperDim> dims;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string key = "hypers[" + std::to_string(i) + "]";
    json h = merge_config(element, list[i], key);
    HyperDim d;
    d.name = h["name"].get<std::string>();
    d.kind = parse_key(key + ".kind", [&] { return parse_hyper_kind(h["kind"].get<std::string>()); });
    d.lower = h["lower"].get<double>();
    d.upper = h["upper"].get<double>();
    d.part = parse_key(key + ".part", [&] { return parse_l2_part(h["part"].get<std::string>()); });
    if (!h["layer"].is_number_integer()) throw ConfigError(key + ".layer", "expected an integer");
    d.layer = h["layer"].get<int>();
    dims.push_back(d);
  }
  return parse_key("hypers", [&] { return HyperSchema(dims); });
}

ModelSpec parse_model(const json& cfg) {
  ModelSpec s;
  const json& hidden = at(cfg, "model.hidden");
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (!hidden[i].is_number_integer() || hidden[i].get<std::int64_t>() <= 0)
      throw ConfigError("model.hidden[" + std::to_string(i) + "]", "expected a positive integer");
    s.hidden.push_back(hidden[i].get<std::size_t>());
  }
  const json& conv = at(cfg, "model.conv");
  const json conv_default = json::parse(R"({"channels": 8, "kernel": 3, "padding": "same"})");
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const std::string key = "model.conv[" + std::to_string(i) + "]";
    json c = merge_config(conv_default, conv[i], key);
    ConvSpec spec;
    spec.channels = get_positive(c, "channels");
    spec.kernel = get_positive(c, "kernel");
    const auto pad = c["padding"].get<std::string>();
    if (pad == "same") spec.padding = ops::Padding::same;
    else if (pad == "valid") spec.padding = ops::Padding::valid;
    else throw ConfigError(key + ".padding", "expected same or valid");
    s.conv.push_back(spec);
  }
  s.kind = parse_key("model.kind", [&] { return parse_layer_kind(get<std::string>(cfg, "model.kind")); });
  s.members = get_positive(cfg, "model.members");
  s.bias = get<bool>(cfg, "model.bias");
  s.rank1_init = parse_key("model.rank1_init", [&] { return parse_rank1_init(get<std::string>(cfg, "model.rank1_init")); });
  s.couple_uv_to_rs = get<bool>(cfg, "model.couple_uv_to_rs");
  s.regularize_rank1 = get<bool>(cfg, "model.regularize_rank1");
  s.train_rank1 = get<bool>(cfg, "model.train_rank1");
  s.embedding.arch =
      parse_key("model.embedding", [&] { return parse_embedding_arch(get<std::string>(cfg, "model.embedding")); });
  s.embedding.init =
      parse_key("model.embedding_init", [&] { return parse_embedding_init(get<std::string>(cfg, "model.embedding_init")); });
  return s;
}

double unit_interval(const json& cfg, const std::string& key) {
  const double v = get<double>(cfg, key);
  if (!(v >= 0.0 && v < 1.0)) throw ConfigError(key, "must lie in [0, 1)");
  return v;
}

Dataset load_source(const std::string& source, SynthKind kind, std::size_t n, std::uint64_t seed,
                    const SynthOptions& opts, const std::string& path, const std::string& labels_path,
                    const std::string& target, bool regression, const std::string& key) {
  if (source == "synth") return synth(kind, n, seed, opts);
  if (source == "csv") {
    if (path.empty()) throw ConfigError(key + ".path", "csv source needs a path");
    return load_csv(path, target, regression);
  }
  if (source == "idx") {
    if (path.empty() || labels_path.empty()) throw ConfigError(key + ".path", "idx source needs path and labels_path");
    return load_idx(path, labels_path);
  }
  throw ConfigError(key + ".source", "unknown source '" + source + "'");
}

}  // namespace

ExperimentConfig parse_experiment(const json& raw) {
  const json cfg = merge_config(default_config(), raw);
  ExperimentConfig e;
  e.raw = cfg;
  e.seed = get<std::uint64_t>(cfg, "seed");
  const auto task = get<std::string>(cfg, "task");
  if (task == "classification") e.loss.task = Task::classification;
  else if (task == "regression") e.loss.task = Task::regression;
  else throw ConfigError("task", "expected classification or regression");

  e.data.source = get<std::string>(cfg, "data.source");
  if (e.data.source != "synth" && e.data.source != "csv" && e.data.source != "idx")
    throw ConfigError("data.source", "expected synth, csv or idx");
  e.data.kind = parse_key("data.kind", [&] { return parse_synth_kind(get<std::string>(cfg, "data.kind")); });
  e.data.n = get_positive(cfg, "data.n");
  e.data.seed = get<std::uint64_t>(cfg, "data.seed");
  e.data.synth.separation = get<double>(cfg, "data.separation");
  e.data.synth.nuisance_dims = get_size(cfg, "data.nuisance_dims");
  e.data.synth.regime_dims = get_positive(cfg, "data.regime_dims");
  e.data.synth.noise = get<double>(cfg, "data.noise");
  e.data.path = get<std::string>(cfg, "data.path");
  e.data.labels_path = get<std::string>(cfg, "data.labels_path");
  e.data.target = get<std::string>(cfg, "data.target");
  e.data.val_fraction = unit_interval(cfg, "data.val_fraction");
  e.data.test_fraction = unit_interval(cfg, "data.test_fraction");
  if (e.data.val_fraction <= 0.0) throw ConfigError("data.val_fraction", "must be positive");
  if (e.data.val_fraction + e.data.test_fraction >= 1.0)
    throw ConfigError("data.test_fraction", "val_fraction + test_fraction must be below 1");

  e.spec = parse_model(cfg);
  e.schema = parse_schema(cfg);

  e.plan.epochs = get_positive(cfg, "train.epochs");
  e.plan.batch_size = get_positive(cfg, "train.batch_size");
  e.plan.warmup_epochs = get_size(cfg, "train.warmup_epochs");
  e.plan.train_steps_per_tune = get_positive(cfg, "train.train_steps_per_tune");
  e.plan.val_batch_size = get_size(cfg, "train.val_batch_size");
  e.plan.optimizer = optimizer(cfg, "train.optimizer", "train.lr");
  e.plan.tune_optimizer = optimizer(cfg, "train.tune_optimizer", "train.tune_lr");
  e.plan.tune_bounds = get<bool>(cfg, "train.tune_bounds");
  e.plan.shrink_initial_l2 = get<bool>(cfg, "train.shrink_initial_l2");
  e.plan.eval_each_epoch = get<bool>(cfg, "train.eval_each_epoch");
  e.plan.val_fraction = e.data.val_fraction;
  e.plan.seed = e.seed;

  const json& lam = at(cfg, "train.lambda");
  if (!lam.is_null()) {
    if (!lam.is_object()) throw ConfigError("train.lambda", "expected an object mapping hyperparameter names to values");
    e.lambda.resize(e.schema.size());
    for (std::size_t i = 0; i < e.schema.size(); ++i)
      e.lambda[i] = std::sqrt(e.schema[i].lower * e.schema[i].upper);
    for (const auto& [name, value] : lam.items()) {
      const std::string key = "train.lambda." + name;
      auto idx = e.schema.index_of(name);
      if (!idx) throw ConfigError(key, "no hyperparameter with this name");
      if (!value.is_number()) throw ConfigError(key, "expected a number");
      e.lambda[*idx] = value.get<double>();
    }
    parse_key("train.lambda", [&] {
      check_hyper_vector(e.lambda, e.schema);
      return 0;
    });
  }

  e.loss.tau = get<double>(cfg, "loss.tau");
  if (!(e.loss.tau >= 0.0)) throw ConfigError("loss.tau", "must be nonnegative");
  e.loss.fixed_smoothing = unit_interval(cfg, "loss.label_smoothing");

  e.kappa = get_positive(cfg, "search.kappa");
  e.k = get_positive(cfg, "search.k");
  e.workers = get_positive(cfg, "search.workers");
  e.reuse_originals = get<bool>(cfg, "search.reuse_originals");
  e.save_checkpoints = get<bool>(cfg, "search.save_checkpoints");

  e.ood.source = get<std::string>(cfg, "ood.source");
  if (e.ood.source != "noise" && e.ood.source != "synth" && e.ood.source != "csv" && e.ood.source != "idx")
    throw ConfigError("ood.source", "expected noise, synth, csv or idx");
  e.ood.scale = get<double>(cfg, "ood.scale");
  e.ood.n = get_positive(cfg, "ood.n");
  e.ood.kind = parse_key("ood.kind", [&] { return parse_synth_kind(get<std::string>(cfg, "ood.kind")); });
  e.ood.seed = get<std::uint64_t>(cfg, "ood.seed");
  e.ood.path = get<std::string>(cfg, "ood.path");
  e.ood.labels_path = get<std::string>(cfg, "ood.labels_path");
  e.ood.target = get<std::string>(cfg, "ood.target");

  auto& br = e.bestresponse;
  br.n = get_positive(cfg, "bestresponse.n");
  br.k = get_positive(cfg, "bestresponse.k");
  br.loss = parse_key("bestresponse.loss", [&] { return parse_br_loss(get<std::string>(cfg, "bestresponse.loss")); });
  br.lambda_lo = get<double>(cfg, "bestresponse.lambda_lo");
  br.lambda_hi = get<double>(cfg, "bestresponse.lambda_hi");
  if (!(br.lambda_lo > 0.0 && br.lambda_hi >= br.lambda_lo))
    throw ConfigError("bestresponse.lambda_hi", "need 0 < lambda_lo <= lambda_hi");
  br.spread = get<double>(cfg, "bestresponse.spread");
  br.noise = get<double>(cfg, "bestresponse.noise");
  br.h.clear();
  for (const auto& v : at(cfg, "bestresponse.h")) {
    if (!v.is_number_integer() || v.get<std::int64_t>() <= 0) throw ConfigError("bestresponse.h", "expected positive integers");
    br.h.push_back(v.get<std::size_t>());
  }
  br.seeds.clear();
  for (const auto& v : at(cfg, "bestresponse.seeds")) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("bestresponse.seeds", "expected nonnegative integers");
    br.seeds.push_back(v.get<std::uint64_t>());
  }
  if (br.h.empty() || br.seeds.empty()) throw ConfigError("bestresponse.h", "h and seeds must be nonempty");
  br.fit.steps = get_positive(cfg, "bestresponse.steps");
  br.fit.lambda_batch = get_positive(cfg, "bestresponse.lambda_batch");
  br.fit.optimizer = {OptimizerKind::adam, get<double>(cfg, "bestresponse.lr")};
  br.grid = get_positive(cfg, "bestresponse.grid");

  e.bins = get_positive(cfg, "report.bins");
  return e;
}

DataSplit load_data(ExperimentConfig& cfg) {
  const bool regression = cfg.loss.task == Task::regression;
  Dataset all = load_source(cfg.data.source, cfg.data.kind, cfg.data.n, cfg.data.seed, cfg.data.synth, cfg.data.path,
                            cfg.data.labels_path, cfg.data.target, regression, "data");
  if (all.size() == 0) throw std::invalid_argument("data: no examples");
  if (regression && all.targets.size() != all.size())
    throw ConfigError("task", "regression needs real-valued targets");
  if (!regression && all.labels.size() != all.size())
    throw ConfigError("task", "classification needs integer labels");
  cfg.spec.input_shape = Shape(all.features.shape().begin() + 1, all.features.shape().end());
  cfg.spec.outputs = regression ? 1 : all.classes;
  return split_dataset(all, cfg.data.val_fraction, cfg.data.test_fraction, cfg.data.seed);
}

Dataset load_ood(const ExperimentConfig& cfg) {
  Dataset out;
  if (cfg.ood.source == "noise") {
    Shape shape{cfg.ood.n};
    shape.insert(shape.end(), cfg.spec.input_shape.begin(), cfg.spec.input_shape.end());
    out.features = Tensor(shape);
    Rng rng = Rng(cfg.ood.seed).derive("ood");
    for (double& v : out.features.data()) v = rng.normal(0.0, cfg.ood.scale);
  } else {
    out = load_source(cfg.ood.source, cfg.ood.kind, cfg.ood.n, cfg.ood.seed, cfg.data.synth, cfg.ood.path,
                      cfg.ood.labels_path, cfg.ood.target, false, "ood");
  }
  Shape row(out.features.shape().begin() + 1, out.features.shape().end());
  if (row != cfg.spec.input_shape)
    throw ConfigError("ood", "out-of-distribution rows have shape " + shape_string(row) + ", model expects " +
                                 shape_string(cfg.spec.input_shape));
  return out;
}

json metric_report_to_json(const MetricReport& r) {
  json bins = json::array();
  for (const auto& b : r.bins)
    bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}, {"accuracy", b.accuracy},
                    {"confidence", b.confidence}});
  json j{{"n", r.n}, {"nll", r.nll}, {"accuracy", r.accuracy}, {"brier", r.brier}, {"ece", r.ece}, {"bins", bins}};
  if (r.diversity) j["diversity"] = *r.diversity;
  if (r.mmc) j["mmc"] = *r.mmc;
  if (r.auroc) j["auroc"] = *r.auroc;
  if (r.fpr95) j["fpr95"] = *r.fpr95;
  return j;
}

}  // namespace hyperens
