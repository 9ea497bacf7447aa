#pragma once

#include <optional>
#include <span>
#include <vector>

#include "hyperens/tensor.hpp"

namespace hyperens {

struct CalibrationBin {
  double lower = 0.0, upper = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0, confidence = 0.0;
};

struct MetricReport {
  double nll = 0.0, accuracy = 0.0, brier = 0.0, ece = 0.0;
  std::optional<double> diversity;
  std::optional<double> mmc, auroc, fpr95;
  std::size_t n = 0;
  std::vector<CalibrationBin> bins;
};

struct BasicMetrics {
  double nll = 0.0, accuracy = 0.0, brier = 0.0;
};

/// Row argmax, ties to the lowest class.
std::vector<std::size_t> argmax_rows(const Tensor& probs);
/// Rows must sum to one within 1e-6.
void check_probabilities(const Tensor& probs);

/// NLL (floored at 1e-12), accuracy and Brier sum of squares on [n, C] probabilities.
BasicMetrics basic_metrics(const Tensor& probs, std::span<const std::size_t> labels);

/// Equal-width confidence bins; a confidence on a bin edge goes to the upper bin.
struct EceResult {
  double ece = 0.0;
  std::vector<CalibrationBin> bins;
};
EceResult ece(const Tensor& probs, std::span<const std::size_t> labels, std::size_t n_bins = 15);

/// Mean pairwise argmax disagreement divided by (1 - ensemble accuracy). Absent
/// when the ensemble is perfectly accurate.
std::optional<double> diversity(const std::vector<std::vector<std::size_t>>& member_preds, double ensemble_accuracy);

/// In-distribution samples are positives, scored by max probability.
struct OodMetrics {
  double mmc_out = 0.0, auroc = 0.0, fpr95 = 0.0;
};
OodMetrics ood_metrics(const Tensor& in_probs, const Tensor& out_probs);

/// Full report for member probabilities [K, n, C], evaluated on the member average.
MetricReport evaluate_members(const Tensor& member_probs, std::span<const std::size_t> labels, std::size_t n_bins = 15);
/// Mean over the leading member axis: [K, n, C] -> [n, C].
Tensor average_members(const Tensor& member_probs);

}  // namespace hyperens
