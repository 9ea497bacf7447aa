#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hyperens/dataset.hpp"
#include "hyperens/hyperdist.hpp"
#include "hyperens/network.hpp"
#include "hyperens/objectives.hpp"
#include "hyperens/optimizer.hpp"

namespace hyperens {

struct TrainPlan {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::size_t warmup_epochs = 5;
  std::size_t train_steps_per_tune = 2;
  /// Rows per validation batch in the tuning step; 0 means batch_size.
  std::size_t val_batch_size = 0;
  OptimizerConfig optimizer{OptimizerKind::adam, 1e-3};
  OptimizerConfig tune_optimizer{OptimizerKind::adam, 5e-4};
  std::uint64_t seed = 0;
  /// Fraction of the training data held out for validation by callers that split.
  double val_fraction = 0.2;
  /// Frozen distributions: the tuning step is skipped (warm-up forever).
  bool tune_bounds = true;
  /// Start each l2 range one decade inside the schema range on both ends.
  bool shrink_initial_l2 = false;
  /// Evaluate validation metrics after each epoch.
  bool eval_each_epoch = true;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over the epoch's train steps
  double val_loss = 0.0;    // ensemble NLL or squared error at the prediction lambda
  double val_accuracy = 0.0;
};

/// CSV columns: epoch, member, hyper_name, lower, upper, mean.
struct BoundRow {
  std::size_t epoch = 0, member = 0;
  std::string hyper_name;
  double lower = 0.0, upper = 0.0, mean = 0.0;
};

struct TrainedModel {
  bool ok = true;
  std::string failure;
  std::unique_ptr<Network> net;
  /// Fixed lambda (single entry) or the per-member distribution means.
  std::vector<HyperVector> lambda;
  std::vector<MemberDistribution> distributions;
  std::vector<EpochRecord> history;
  /// Objective value of every train step, in order.
  std::vector<double> step_losses;
  std::vector<BoundRow> trajectory;
  std::size_t train_steps = 0, tune_steps = 0, warmup_steps = 0;
};

/// Training set and held-out validation set for one run.
struct TrainData {
  const Dataset& train;
  const Dataset& val;
};

/// Minimizes the mean batch loss plus the L2 term at a fixed lambda. Divergence
/// (non-finite loss or gradient) yields ok = false instead of throwing.
TrainedModel train_fixed(const ModelSpec& spec, const HyperSchema& schema, const HyperVector& lambda,
                         const TrainPlan& plan, const LossConfig& loss, TrainData data, std::uint64_t seed);

struct StepResult {
  double loss = 0.0;
  /// The sampled lambda rows [K*b, m] used by this step.
  Tensor lambda;
  std::vector<std::size_t> rows;  // dataset rows of the batch
};

/// State of a hyper-batch ensemble fit: network, member distributions and the
/// two optimizers. Steps can be driven one at a time or through run().
class HyperBatchTrainer {
 public:
  HyperBatchTrainer(const ModelSpec& spec, const HyperSchema& schema, const TrainPlan& plan, const LossConfig& loss,
                    TrainData data, std::uint64_t seed);

  /// One optimizer step on the network with one lambda sample per tiled row;
  /// the distributions are left alone.
  StepResult train_step(std::span<const std::size_t> rows);
  /// One optimizer step on the log-bounds against the validation objective,
  /// followed by projection; network weights are left alone.
  double tune_step(std::span<const std::size_t> val_rows);
  /// Next validation batch, drawn cyclically.
  std::vector<std::size_t> next_val_rows();

  /// Full schedule: warm-up epochs with train steps only, then
  /// train_steps_per_tune train steps per tune step. A trailing incomplete
  /// cycle is dropped so the ratio holds exactly.
  TrainedModel run();

  Network& network() { return *net_; }
  const std::vector<MemberDistribution>& distributions() const { return dists_; }
  void set_distributions(std::vector<MemberDistribution> d);
  std::vector<HyperVector> means() const;
  Optimizer& optimizer() { return opt_; }

 private:
  void sync_bounds_from_dists();
  std::vector<BoundRow> bound_rows(std::size_t epoch) const;

  ModelSpec spec_;
  HyperSchema schema_;
  TrainPlan plan_;
  LossConfig loss_;
  TrainData data_;
  std::unique_ptr<Network> net_;
  std::vector<MemberDistribution> dists_;
  Parameter log_lower_, log_upper_;
  Optimizer opt_, tune_opt_;
  Rng hyper_rng_, dropout_rng_, shuffle_rng_;
  std::vector<std::size_t> val_order_;
  std::size_t val_cursor_ = 0;
};

TrainedModel fit_hyper_batch(const ModelSpec& spec, const HyperSchema& schema, const TrainPlan& plan,
                             const LossConfig& loss, TrainData data, std::uint64_t seed);

/// Eval-mode validation loss and accuracy of a trained network at per-member
/// lambda values (accuracy is 0 for regression).
std::pair<double, double> evaluate_loss(Network& net, const Dataset& data, std::span<const HyperVector> lambda,
                                        Task task);

/// Batches of row indices for one epoch, shuffled with the given stream.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng);

void write_trajectory_csv(const std::filesystem::path& path, const std::vector<BoundRow>& rows);

}  // namespace hyperens
