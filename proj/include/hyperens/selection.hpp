#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hyperens/dataset.hpp"
#include "hyperens/metrics.hpp"
#include "hyperens/persistence.hpp"
#include "hyperens/trainer.hpp"

namespace hyperens {

/// One trained candidate. Predictions are probabilities [n, C]; failed records
/// carry none and score as +inf.
struct ModelRecord {
  std::size_t id = 0;
  std::string stage = "search";  // "search" or "stratify"
  HyperVector lambda;
  std::uint64_t init_seed = 0;
  std::string checkpoint;   // path relative to the output directory, may be empty
  std::string predictions;  // same, for the prediction file
  Tensor val_predictions, test_predictions;
  bool ok = true;
  std::string failure;
  double val_nll = 0.0, val_accuracy = 0.0;
  /// Stratified grid position: source search record and seed column.
  std::optional<std::size_t> row, column;
};

json record_to_json(const ModelRecord& r);
/// Predictions are not loaded here; see load_predictions.
ModelRecord record_from_json(const json& j);
void load_predictions(ModelRecord& r, const std::filesystem::path& out_dir);

struct SelectionStep {
  std::size_t id = 0;
  double score = 0.0;
};

struct EnsembleSelection {
  /// Model ids in the order they were added (repeats allowed).
  std::vector<std::size_t> sequence;
  /// (id, multiplicity) in order of first appearance.
  std::vector<std::pair<std::size_t, std::size_t>> members;
  /// Ensemble score after each accepted step.
  std::vector<SelectionStep> history;
  double score = 0.0;

  std::size_t unique() const { return members.size(); }
  std::size_t length() const { return sequence.size(); }
  static EnsembleSelection from_sequence(std::vector<std::size_t> ids);
};

/// Validation NLL of the uniform average over a multiset of records, with
/// member probabilities summed in the given order.
double ensemble_score(const std::vector<const ModelRecord*>& members, std::span<const std::size_t> labels);

/// Greedy selection with replacement: start empty, repeatedly add the model
/// that gives the lowest ensemble score, stop at the first step without strict
/// improvement. Once K distinct models are in, only those can be added again;
/// the length is capped at 5K. Ties go to the lowest id.
EnsembleSelection hyper_ens(const std::vector<ModelRecord>& records, std::span<const std::size_t> labels, std::size_t K);
/// The K records with the best single-model scores, uniform weights.
EnsembleSelection top_k_select(const std::vector<ModelRecord>& records, std::span<const std::size_t> labels,
                               std::size_t K);
/// The first K ok records (by id) whose lambda equals `lambda`.
EnsembleSelection deep_ens(const std::vector<ModelRecord>& records, const HyperVector& lambda,
                           std::span<const std::size_t> labels, std::size_t K);
/// Greedy selection restricted to records sharing one init seed.
EnsembleSelection fixed_init_hyper_ens(const std::vector<ModelRecord>& records, std::uint64_t init_seed,
                                       std::span<const std::size_t> labels, std::size_t K);

/// Multiplicity-weighted metrics of a selection on the validation or test
/// predictions; diversity is over the distinct members.
MetricReport selection_metrics(const std::vector<ModelRecord>& records, const EnsembleSelection& sel,
                               std::span<const std::size_t> labels, bool test, std::size_t n_bins = 15);

json selection_to_json(const EnsembleSelection& sel);

/// Everything a trial needs. Records and prediction files land in out_dir
/// (ledger.jsonl, preds/, ckpt/); out_dir may be empty for in-memory runs.
struct SearchContext {
  ModelSpec spec;
  HyperSchema schema;
  TrainPlan plan;
  LossConfig loss;
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
  const Dataset* test = nullptr;
  std::filesystem::path out_dir;
  std::size_t workers = 1;
  bool save_checkpoints = false;
};

/// Records already in the ledger, keyed by id, with predictions loaded.
std::vector<ModelRecord> load_records(const std::filesystem::path& out_dir, const std::string& stage = "");

/// kappa trials with lambda drawn log-uniformly over the schema bounds and a
/// fresh init seed each. Trials already recorded in out_dir are reused, so an
/// interrupted search resumes where it stopped. Returns records ordered by id.
std::vector<ModelRecord> rand_search(const SearchContext& ctx, std::size_t kappa, std::uint64_t seed);

/// Trains K init seeds for each distinct lambda of `initial`, the grid of
/// hyper-deep ensembles. With reuse_originals the searched model fills
/// column 0. Stratified ids start at `first_id`; cell (r, c) has id
/// first_id + r*K + c, and all retrained cells of column c share one init seed.
std::vector<ModelRecord> stratify(const SearchContext& ctx, const std::vector<ModelRecord>& search,
                                  const EnsembleSelection& initial, std::size_t K, std::uint64_t seed,
                                  bool reuse_originals, std::size_t first_id);

struct HyperDeepResult {
  EnsembleSelection initial;  // greedy over the search records
  EnsembleSelection final;    // greedy over the stratified grid
  std::vector<ModelRecord> search, grid;
};
HyperDeepResult hyper_deep_ens(const SearchContext& ctx, std::size_t K, std::size_t kappa, std::uint64_t seed,
                               bool reuse_originals);

/// Trains one record (used by search and stratification).
ModelRecord run_trial(const SearchContext& ctx, std::size_t id, const std::string& stage, const HyperVector& lambda,
                      std::uint64_t init_seed);

}  // namespace hyperens
