#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hyperens/bestresponse.hpp"
#include "hyperens/dataset.hpp"
#include "hyperens/metrics.hpp"
#include "hyperens/network.hpp"
#include "hyperens/persistence.hpp"
#include "hyperens/trainer.hpp"

namespace hyperens {

/// Where examples come from: "synth", "csv" or "idx".
struct DataConfig {
  std::string source = "synth";
  SynthKind kind = SynthKind::two_gaussians;
  std::size_t n = 1000;
  SynthOptions synth;
  std::string path, labels_path, target = "label";
  double val_fraction = 0.2, test_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Out-of-distribution inputs for ood-eval: "noise" draws N(0, scale^2) in
/// the model's input shape; "synth", "csv" and "idx" load data as above.
struct OodConfig {
  std::string source = "noise";
  double scale = 5.0;
  std::size_t n = 500;
  SynthKind kind = SynthKind::ring;
  std::string path, labels_path, target = "label";
  std::uint64_t seed = 1;
};

struct BestResponseConfig {
  std::size_t n = 200, k = 5;
  BrLoss loss = BrLoss::square;
  double lambda_lo = 0.1, lambda_hi = 1.0, spread = 0.05, noise = 0.5;
  std::vector<std::size_t> h{1, 2, 4};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  BrFitOptions fit;
  std::size_t grid = 64;
};

struct ExperimentConfig {
  json raw;
  std::uint64_t seed = 0;
  DataConfig data;
  ModelSpec spec;  // input_shape and outputs are filled in from the data
  HyperSchema schema;
  TrainPlan plan;
  LossConfig loss;
  /// Fixed lambda for `train`; empty means the geometric midpoint of each range.
  HyperVector lambda;
  std::size_t kappa = 20, k = 3, workers = 1;
  bool reuse_originals = true, save_checkpoints = false;
  OodConfig ood;
  BestResponseConfig bestresponse;
  std::size_t bins = 15;
};

/// The full key tree with default values; unknown keys are rejected against it.
json default_config();
/// Converts a merged config, throwing ConfigError with the offending key.
ExperimentConfig parse_experiment(const json& cfg);

/// Loads and splits the configured data and fills spec.input_shape/outputs.
DataSplit load_data(ExperimentConfig& cfg);
Dataset load_ood(const ExperimentConfig& cfg);

json metric_report_to_json(const MetricReport& r);

}  // namespace hyperens
