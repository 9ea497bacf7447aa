#include "hyperens/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "hyperens/ops.hpp"

namespace hyperens {

namespace o = ops;

const char* to_string(Task t) { return t == Task::classification ? "classification" : "regression"; }

Task parse_task(const std::string& s) {
  if (s == "classification") return Task::classification;
  if (s == "regression") return Task::regression;
  throw std::invalid_argument("unknown task '" + s + "'");
}

Tensor smoothed_targets(std::span<const std::size_t> labels, std::size_t classes, std::span<const double> smoothing) {
  if (smoothing.size() != labels.size()) throw ShapeError("smoothed_targets: one smoothing value per row required");
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double s = smoothing[i];
    if (!(s >= 0.0 && s < 1.0)) throw std::invalid_argument("smoothed_targets: smoothing outside [0, 1)");
    if (labels[i] >= classes) throw std::out_of_range("smoothed_targets: label out of range");
    for (std::size_t c = 0; c < classes; ++c) t[i * classes + c] = s / double(classes);
    t[i * classes + labels[i]] += 1.0 - s;
  }
  return t;
}

Var smoothed_xent(Var logits, std::span<const std::size_t> labels, std::span<const double> smoothing) {
  if (logits.value().rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("smoothed_xent: logits " + shape_string(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  if (!logits.value().all_finite()) throw NonFiniteError("smoothed_xent: non-finite logits");
  return o::mean(o::softmax_xent(logits, smoothed_targets(labels, logits.dim(1), smoothing)));
}

std::vector<std::size_t> tile_labels(std::span<const std::size_t> labels, std::size_t members) {
  std::vector<std::size_t> out;
  out.reserve(labels.size() * members);
  for (std::size_t k = 0; k < members; ++k) out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

Var gibbs_loss(Var logits, std::span<const std::size_t> labels, std::size_t members, std::span<const double> smoothing) {
  if (members == 0) throw std::invalid_argument("gibbs_loss: need at least one member");
  // Members hold equally many rows, so the row mean is the mean of member means.
  return smoothed_xent(logits, tile_labels(labels, members), smoothing);
}

Var ensemble_nll(Var probs, std::span<const std::size_t> labels, std::size_t members) {
  const std::size_t b = labels.size();
  if (probs.value().rank() != 2 || probs.dim(0) != b * members)
    throw ShapeError("ensemble_nll: probabilities " + shape_string(probs.shape()));
  Var picked = o::pick(probs, tile_labels(labels, members));
  Var avg = o::mean_axis0(o::reshape(picked, {members, b}));
  return o::scale(o::mean(o::log_clamped(avg, kProbFloor)), -1.0);
}

double ensemble_nll(const Tensor& member_probs, std::span<const std::size_t> labels, std::size_t* clamped) {
  if (member_probs.rank() != 3 || member_probs.dim(1) != labels.size())
    throw ShapeError("ensemble_nll: probabilities " + shape_string(member_probs.shape()));
  const std::size_t K = member_probs.dim(0), b = member_probs.dim(1), C = member_probs.dim(2);
  for (std::size_t r = 0; r < K * b; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += member_probs[r * C + c];
    if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("ensemble_nll: probability row does not sum to 1");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= C) throw std::out_of_range("ensemble_nll: label out of range");
    double p = 0.0;
    for (std::size_t k = 0; k < K; ++k) p += member_probs[(k * b + i) * C + labels[i]];
    p /= double(K);
    if (p < kProbFloor) {
      p = kProbFloor;
      if (clamped) ++*clamped;
    }
    total -= std::log(p);
  }
  return total / double(b);
}

namespace {

void check_prediction(Var pred, std::size_t rows) {
  if (pred.value().rank() != 2 || pred.dim(1) != 1 || pred.dim(0) != rows)
    throw ShapeError("squared loss: prediction " + shape_string(pred.shape()));
}

}  // namespace

Var gibbs_squared(Var pred, std::span<const double> targets, std::size_t members) {
  const std::size_t b = targets.size();
  check_prediction(pred, b * members);
  Tensor y({b * members, 1});
  for (std::size_t k = 0; k < members; ++k)
    for (std::size_t i = 0; i < b; ++i) y[k * b + i] = targets[i];
  return o::mean(o::square(o::sub(pred, pred.tape->constant(std::move(y), "targets"))));
}

Var ensemble_squared(Var pred, std::span<const double> targets, std::size_t members) {
  const std::size_t b = targets.size();
  check_prediction(pred, b * members);
  Var avg = o::mean_axis0(o::reshape(pred, {members, b}));
  Tensor y({b}, std::vector<double>(targets.begin(), targets.end()));
  return o::mean(o::square(o::sub(avg, pred.tape->constant(std::move(y), "targets"))));
}

Var validation_objective(Var val_loss, Var entropy, double tau) {
  if (!(tau >= 0.0)) throw std::invalid_argument("validation_objective: tau must be nonnegative");
  return o::sub(val_loss, o::scale(entropy, tau));
}

}  // namespace hyperens
