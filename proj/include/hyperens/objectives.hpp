#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hyperens/tape.hpp"

namespace hyperens {

enum class Task { classification, regression };
const char* to_string(Task t);
Task parse_task(const std::string& s);

struct LossConfig {
  Task task = Task::classification;
  /// Weight of the entropy term in the validation objective.
  double tau = 1e-3;
  /// Used when the schema carries no label-smoothing entry.
  double fixed_smoothing = 0.0;
};

inline constexpr double kProbFloor = 1e-12;

/// (1 - s) onehot + s / C per row.
Tensor smoothed_targets(std::span<const std::size_t> labels, std::size_t classes, std::span<const double> smoothing);

/// Mean over rows of the cross entropy against smoothed targets.
Var smoothed_xent(Var logits, std::span<const std::size_t> labels, std::span<const double> smoothing);

/// Average member cross entropy. `logits` are the tiled rows [K*b, C]; labels
/// has b entries; smoothing has one entry per tiled row.
Var gibbs_loss(Var logits, std::span<const std::size_t> labels, std::size_t members, std::span<const double> smoothing);

/// -mean log of the member-averaged probability of the true label, with the
/// average probability clamped at kProbFloor. probs are tiled rows [K*b, C].
Var ensemble_nll(Var probs, std::span<const std::size_t> labels, std::size_t members);
/// Same on plain values [K, b, C]; `clamped` counts floored rows.
double ensemble_nll(const Tensor& member_probs, std::span<const std::size_t> labels, std::size_t* clamped = nullptr);

/// Mean over rows of (y - f)^2 for a [N, 1] prediction and b targets tiled K times.
Var gibbs_squared(Var pred, std::span<const double> targets, std::size_t members);
/// Squared error of the member-averaged prediction.
Var ensemble_squared(Var pred, std::span<const double> targets, std::size_t members);

/// val_loss - tau * entropy.
Var validation_objective(Var val_loss, Var entropy, double tau);

/// Labels repeated for K members in tiled order.
std::vector<std::size_t> tile_labels(std::span<const std::size_t> labels, std::size_t members);

}  // namespace hyperens
