#include "hyperens/trainer.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "hyperens/metrics.hpp"

namespace hyperens {

namespace o = ops;

void TrainPlan::validate() const {
  if (epochs == 0) throw std::invalid_argument("plan: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("plan: batch_size must be positive");
  if (train_steps_per_tune == 0) throw std::invalid_argument("plan: train_steps_per_tune must be at least 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("plan: val_fraction must lie in (0, 1)");
  if (!(optimizer.learning_rate >= 0.0) || !(tune_optimizer.learning_rate >= 0.0))
    throw std::invalid_argument("plan: learning rates must be nonnegative");
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t from = 0; from < n; from += batch)
    out.emplace_back(order.begin() + std::ptrdiff_t(from), order.begin() + std::ptrdiff_t(std::min(n, from + batch)));
  return out;
}

namespace {

struct Streams {
  Rng init, shuffle, dropout, hyper, val;
  explicit Streams(std::uint64_t seed)
      : init(Rng(seed).derive("init")),
        shuffle(Rng(seed).derive("shuffle")),
        dropout(Rng(seed).derive("dropout")),
        hyper(Rng(seed).derive("hyper")),
        val(Rng(seed).derive("val")) {}
};

void check_data(const ModelSpec& spec, const LossConfig& loss, const Dataset& d, const char* which) {
  if (d.size() == 0) throw std::invalid_argument(std::string(which) + " set is empty");
  Shape row(d.features.shape().begin() + 1, d.features.shape().end());
  if (row != spec.input_shape)
    throw ShapeError(std::string(which) + " rows have shape " + shape_string(row) + ", model expects " +
                     shape_string(spec.input_shape));
  if (loss.task == Task::classification) {
    if (d.labels.size() != d.size()) throw std::invalid_argument(std::string(which) + " set has no labels");
    for (std::size_t l : d.labels)
      if (l >= spec.outputs) throw std::out_of_range(std::string(which) + " label exceeds the output count");
  } else {
    if (d.targets.size() != d.size()) throw std::invalid_argument(std::string(which) + " set has no targets");
    if (spec.outputs != 1) throw std::invalid_argument("regression needs a single output");
  }
}

/// Training objective on the tiled batch: Gibbs loss plus the L2 term.
Var batch_objective(Tape& tape, Network& net, const Dataset& data, std::span<const std::size_t> rows,
                    const Tensor& lambda, const LossConfig& loss, Rng& dropout_rng) {
  const std::size_t K = net.members(), b = rows.size();
  Dataset batch = data.subset(rows);
  TiledBatch tb = tile_minibatch(batch.features, K);
  auto pass = net.forward(tape, tb.x, tb.member, lambda, std::nullopt, true, &dropout_rng, true);
  Var value;
  if (loss.task == Task::classification) {
    std::vector<double> smoothing(K * b, loss.fixed_smoothing);
    if (auto si = net.schema().smoothing_index()) {
      const std::size_t m = net.schema().size();
      for (std::size_t j = 0; j < K * b; ++j) smoothing[j] = lambda[j * m + *si];
    }
    value = gibbs_loss(pass.output, batch.labels, K, smoothing);
  } else {
    value = gibbs_squared(pass.output, batch.targets, K);
  }
  return pass.l2 ? o::add(value, *pass.l2) : value;
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

double epoch_mean(const std::vector<double>& losses, std::size_t from) {
  if (losses.size() <= from) return std::nan("");
  return std::accumulate(losses.begin() + std::ptrdiff_t(from), losses.end(), 0.0) / double(losses.size() - from);
}

}  // namespace

std::pair<double, double> evaluate_loss(Network& net, const Dataset& data, std::span<const HyperVector> lambda,
                                        Task task) {
  Tensor out = predict_members(net, data.features, lambda, task == Task::classification);
  if (task == Task::classification) {
    const double nll = ensemble_nll(out, data.labels);
    const auto acc = basic_metrics(average_members(out), data.labels).accuracy;
    return {nll, acc};
  }
  Tensor avg = average_members(out);
  double se = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) se += (avg[i] - data.targets[i]) * (avg[i] - data.targets[i]);
  return {se / double(data.size()), 0.0};
}

TrainedModel train_fixed(const ModelSpec& spec, const HyperSchema& schema, const HyperVector& lambda,
                         const TrainPlan& plan, const LossConfig& loss, TrainData data, std::uint64_t seed) {
  plan.validate();
  if (spec.members != 1) throw std::invalid_argument("train_fixed trains a single member");
  check_hyper_vector(lambda, schema);
  check_data(spec, loss, data.train, "training");
  check_data(spec, loss, data.val, "validation");
  Streams rng(seed);
  TrainedModel result;
  result.net = std::make_unique<Network>(spec, schema, rng.init);
  result.lambda = {lambda};
  Network& net = *result.net;
  Optimizer opt(plan.optimizer);
  auto params = net.parameters();
  const std::size_t m = schema.size();

  try {
    for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
      const std::size_t first = result.step_losses.size();
      for (const auto& rows : epoch_batches(data.train.size(), plan.batch_size, rng.shuffle)) {
        Tensor lam({rows.size(), m});
        for (std::size_t j = 0; j < rows.size(); ++j)
          for (std::size_t d = 0; d < m; ++d) lam[j * m + d] = lambda[d];
        Tape tape;
        Var obj = batch_objective(tape, net, data.train, rows, lam, loss, rng.dropout);
        const double value = obj.value().item();
        if (!std::isfinite(value)) throw NonFiniteError("training loss is not finite");
        zero_grads(params);
        tape.backward(obj);
        opt.step(params);
        result.step_losses.push_back(value);
        ++result.train_steps;
      }
      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = epoch_mean(result.step_losses, first);
      if (plan.eval_each_epoch || epoch == plan.epochs) {
        auto [vl, acc] = evaluate_loss(net, data.val, result.lambda, loss.task);
        rec.val_loss = vl;
        rec.val_accuracy = acc;
        if (!std::isfinite(vl)) throw NonFiniteError("validation loss is not finite");
      }
      result.history.push_back(rec);
    }
  } catch (const NonFiniteError& e) {
    result.ok = false;
    result.failure = std::string("diverged: ") + e.what();
  } catch (const GradientError& e) {
    result.ok = false;
    result.failure = std::string("diverged: ") + e.what();
  }
  return result;
}

// ---------------------------------------------------------------------------

HyperBatchTrainer::HyperBatchTrainer(const ModelSpec& spec, const HyperSchema& schema, const TrainPlan& plan,
                                     const LossConfig& loss, TrainData data, std::uint64_t seed)
    : spec_(spec),
      schema_(schema),
      plan_(plan),
      loss_(loss),
      data_(data),
      opt_(plan.optimizer),
      tune_opt_(plan.tune_optimizer),
      hyper_rng_(0),
      dropout_rng_(0),
      shuffle_rng_(0) {
  plan_.validate();
  if (spec.members == 0) throw std::invalid_argument("fit_hyper_batch: K must be at least 1");
  if (!(loss.tau >= 0.0)) throw std::invalid_argument("fit_hyper_batch: tau must be nonnegative");
  check_data(spec, loss, data.train, "training");
  check_data(spec, loss, data.val, "validation");
  Streams rng(seed);
  hyper_rng_ = rng.hyper;
  dropout_rng_ = rng.dropout;
  shuffle_rng_ = rng.shuffle;
  net_ = std::make_unique<Network>(spec, schema, rng.init);
  dists_.assign(spec.members, initial_distribution(schema, plan.shrink_initial_l2));
  log_lower_ = Parameter("tune/log_lower", Tensor({spec.members, schema.size()}));
  log_upper_ = Parameter("tune/log_upper", Tensor({spec.members, schema.size()}));
  sync_bounds_from_dists();
  val_order_.resize(data.val.size());
  std::iota(val_order_.begin(), val_order_.end(), 0);
  rng.val.shuffle(std::span<std::size_t>(val_order_));
}

void HyperBatchTrainer::sync_bounds_from_dists() {
  const std::size_t m = schema_.size();
  for (std::size_t k = 0; k < dists_.size(); ++k)
    for (std::size_t d = 0; d < m; ++d) {
      log_lower_.value[k * m + d] = std::log(dists_[k].lower[d]);
      log_upper_.value[k * m + d] = std::log(dists_[k].upper[d]);
    }
}

void HyperBatchTrainer::set_distributions(std::vector<MemberDistribution> d) {
  if (d.size() != spec_.members) throw std::invalid_argument("set_distributions: one distribution per member");
  for (const auto& x : d) check_distribution(x, schema_);
  dists_ = std::move(d);
  sync_bounds_from_dists();
}

std::vector<HyperVector> HyperBatchTrainer::means() const {
  std::vector<HyperVector> out;
  for (const auto& d : dists_) out.push_back(mean(d));
  return out;
}

std::vector<std::size_t> HyperBatchTrainer::next_val_rows() {
  const std::size_t n = val_order_.size();
  const std::size_t b = std::min(n, plan_.val_batch_size ? plan_.val_batch_size : plan_.batch_size);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < b; ++i) {
    rows.push_back(val_order_[val_cursor_]);
    val_cursor_ = (val_cursor_ + 1) % n;
  }
  return rows;
}

StepResult HyperBatchTrainer::train_step(std::span<const std::size_t> rows) {
  if (rows.empty()) throw std::invalid_argument("train_step: empty batch");
  const std::size_t K = spec_.members, b = rows.size(), m = schema_.size();
  StepResult res;
  res.rows.assign(rows.begin(), rows.end());
  res.lambda = Tensor({K * b, m});
  for (std::size_t j = 0; j < K * b; ++j) {
    HyperVector lam = sample(dists_[j / b], hyper_rng_);
    for (std::size_t d = 0; d < m; ++d) res.lambda[j * m + d] = lam[d];
  }
  Tape tape;
  Var obj = batch_objective(tape, *net_, data_.train, rows, res.lambda, loss_, dropout_rng_);
  res.loss = obj.value().item();
  auto params = net_->parameters();
  zero_grads(params);
  tape.backward(obj);
  opt_.step(params);
  return res;
}

double HyperBatchTrainer::tune_step(std::span<const std::size_t> val_rows) {
  if (val_rows.empty()) throw std::invalid_argument("tune_step: empty batch");
  const std::size_t K = spec_.members, b = val_rows.size(), m = schema_.size();
  Dataset batch = data_.val.subset(val_rows);
  TiledBatch tb = tile_minibatch(batch.features, K);
  Tensor u({K * b, m}), lam({K * b, m});
  for (std::size_t j = 0; j < K * b; ++j) {
    const std::size_t k = j / b;
    for (std::size_t d = 0; d < m; ++d) {
      const double uj = hyper_rng_.uniform();
      u[j * m + d] = uj;
      const double la = log_lower_.value[k * m + d], lb = log_upper_.value[k * m + d];
      lam[j * m + d] = std::exp(la + uj * (lb - la));
    }
  }
  Tape tape;
  Var la = tape.parameter(log_lower_), lb = tape.parameter(log_upper_);
  Var z = reparam_normalized(la, lb, u, tb.member, schema_);
  auto pass = net_->forward(tape, tb.x, tb.member, lam, z, false, nullptr, false);
  Var val = loss_.task == Task::classification ? ensemble_nll(o::softmax(pass.output), batch.labels, K)
                                               : ensemble_squared(pass.output, batch.targets, K);
  Var obj = validation_objective(val, entropy(la, lb), loss_.tau);
  zero_grads(net_->parameters());
  log_lower_.zero_grad();
  log_upper_.zero_grad();
  tape.backward(obj);
  std::vector<Parameter*> bounds{&log_lower_, &log_upper_};
  tune_opt_.step(bounds);
  for (std::size_t k = 0; k < K; ++k) {
    MemberDistribution d;
    for (std::size_t i = 0; i < m; ++i) {
      d.lower.push_back(std::exp(log_lower_.value[k * m + i]));
      d.upper.push_back(std::exp(log_upper_.value[k * m + i]));
    }
    dists_[k] = project(d, schema_);
  }
  sync_bounds_from_dists();
  return obj.value().item();
}

std::vector<BoundRow> HyperBatchTrainer::bound_rows(std::size_t epoch) const {
  std::vector<BoundRow> out;
  for (std::size_t k = 0; k < dists_.size(); ++k) {
    HyperVector mu = mean(dists_[k]);
    for (std::size_t d = 0; d < schema_.size(); ++d)
      out.push_back({epoch, k, schema_[d].name, dists_[k].lower[d], dists_[k].upper[d], mu[d]});
  }
  return out;
}

TrainedModel HyperBatchTrainer::run() {
  if (!net_) throw std::logic_error("HyperBatchTrainer::run called twice");
  TrainedModel result;
  const std::size_t n = data_.train.size();
  const std::size_t per_epoch = (n + plan_.batch_size - 1) / plan_.batch_size;
  const std::size_t warmup = std::min(plan_.warmup_epochs, plan_.epochs);
  const std::size_t T = plan_.train_steps_per_tune;
  std::size_t budget = (plan_.epochs - warmup) * per_epoch;
  if (plan_.tune_bounds) budget -= budget % T;
  std::size_t post = 0;
  auto traj = bound_rows(0);
  result.trajectory.insert(result.trajectory.end(), traj.begin(), traj.end());

  for (std::size_t epoch = 1; epoch <= plan_.epochs; ++epoch) {
    const bool warming = epoch <= warmup;
    const std::size_t first = result.step_losses.size();
    for (const auto& rows : epoch_batches(n, plan_.batch_size, shuffle_rng_)) {
      if (!warming && post >= budget) break;
      StepResult r = train_step(rows);
      result.step_losses.push_back(r.loss);
      if (warming) {
        ++result.warmup_steps;
        continue;
      }
      ++result.train_steps;
      ++post;
      if (plan_.tune_bounds && post % T == 0) {
        tune_step(next_val_rows());
        ++result.tune_steps;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_mean(result.step_losses, first);
    if (plan_.eval_each_epoch || epoch == plan_.epochs) {
      auto mu = means();
      auto [vl, acc] = evaluate_loss(*net_, data_.val, mu, loss_.task);
      rec.val_loss = vl;
      rec.val_accuracy = acc;
    }
    result.history.push_back(rec);
    traj = bound_rows(epoch);
    result.trajectory.insert(result.trajectory.end(), traj.begin(), traj.end());
  }
  result.distributions = dists_;
  result.lambda = means();
  result.net = std::move(net_);
  return result;
}

TrainedModel fit_hyper_batch(const ModelSpec& spec, const HyperSchema& schema, const TrainPlan& plan,
                             const LossConfig& loss, TrainData data, std::uint64_t seed) {
  return HyperBatchTrainer(spec, schema, plan, loss, data, seed).run();
}

void write_trajectory_csv(const std::filesystem::path& path, const std::vector<BoundRow>& rows) {
  std::vector<std::vector<std::string>> out;
  for (const auto& r : rows)
    out.push_back({std::to_string(r.epoch), std::to_string(r.member), r.hyper_name, format_double(r.lower),
                   format_double(r.upper), format_double(r.mean)});
  write_csv(path, {"epoch", "member", "hyper_name", "lower", "upper", "mean"}, out);
}

}  // namespace hyperens
