#include "hyperens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hyperens {

namespace {

void check_rows(const Tensor& probs, std::span<const std::size_t> labels, const char* who) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size())
    throw ShapeError(std::string(who) + ": probabilities " + shape_string(probs.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  for (std::size_t l : labels)
    if (l >= probs.dim(1)) throw std::out_of_range(std::string(who) + ": label out of range");
}

std::vector<double> confidences(const Tensor& probs) {
  const std::size_t n = probs.dim(0), C = probs.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = *std::max_element(probs.data().begin() + i * C, probs.data().begin() + (i + 1) * C);
  return out;
}

}  // namespace

std::vector<std::size_t> argmax_rows(const Tensor& probs) {
  const std::size_t n = probs.dim(0), C = probs.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (probs[i * C + c] > probs[i * C + best]) best = c;
    out[i] = best;
  }
  return out;
}

void check_probabilities(const Tensor& probs) {
  if (probs.rank() < 2) throw ShapeError("probabilities need a class axis");
  const std::size_t C = probs.shape().back(), rows = probs.size() / C;
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += probs[i * C + c];
    if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("probability row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
}

BasicMetrics basic_metrics(const Tensor& probs, std::span<const std::size_t> labels) {
  check_rows(probs, labels, "basic_metrics");
  check_probabilities(probs);
  const std::size_t n = probs.dim(0), C = probs.dim(1);
  if (n == 0) throw std::invalid_argument("basic_metrics: empty set");
  BasicMetrics m;
  auto pred = argmax_rows(probs);
  for (std::size_t i = 0; i < n; ++i) {
    m.nll -= std::log(std::max(probs[i * C + labels[i]], 1e-12));
    m.accuracy += pred[i] == labels[i];
    for (std::size_t c = 0; c < C; ++c) {
      const double d = probs[i * C + c] - (c == labels[i] ? 1.0 : 0.0);
      m.brier += d * d;
    }
  }
  m.nll /= double(n);
  m.accuracy /= double(n);
  m.brier /= double(n);
  return m;
}

EceResult ece(const Tensor& probs, std::span<const std::size_t> labels, std::size_t n_bins) {
  check_rows(probs, labels, "ece");
  if (n_bins == 0) throw std::invalid_argument("ece: need at least one bin");
  const std::size_t n = probs.dim(0);
  EceResult r;
  r.bins.resize(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    r.bins[b].lower = double(b) / double(n_bins);
    r.bins[b].upper = double(b + 1) / double(n_bins);
  }
  auto conf = confidences(probs);
  auto pred = argmax_rows(probs);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = conf[i];
    std::size_t b = std::min<std::size_t>(n_bins - 1, std::size_t(std::max(0.0, std::floor(c * double(n_bins)))));
    // Settle rounding so that edge values land in the upper bin.
    while (b + 1 < n_bins && c >= r.bins[b + 1].lower) ++b;
    while (b > 0 && c < r.bins[b].lower) --b;
    auto& bin = r.bins[b];
    ++bin.count;
    bin.accuracy += pred[i] == labels[i];
    bin.confidence += c;
  }
  for (auto& bin : r.bins) {
    if (bin.count == 0) continue;
    bin.accuracy /= double(bin.count);
    bin.confidence /= double(bin.count);
    r.ece += double(bin.count) / double(n) * std::abs(bin.accuracy - bin.confidence);
  }
  return r;
}

std::optional<double> diversity(const std::vector<std::vector<std::size_t>>& member_preds, double ensemble_accuracy) {
  const std::size_t K = member_preds.size();
  if (K < 2) throw std::invalid_argument("diversity: need at least two members");
  const std::size_t n = member_preds[0].size();
  if (n == 0) throw std::invalid_argument("diversity: no points");
  for (const auto& p : member_preds)
    if (p.size() != n) throw ShapeError("diversity: members disagree on the number of points");
  if (!(ensemble_accuracy < 1.0)) return std::nullopt;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a + 1; b < K; ++b) {
      std::size_t differ = 0;
      for (std::size_t i = 0; i < n; ++i) differ += member_preds[a][i] != member_preds[b][i];
      total += double(differ) / double(n);
      ++pairs;
    }
  return total / double(pairs) / (1.0 - ensemble_accuracy);
}

OodMetrics ood_metrics(const Tensor& in_probs, const Tensor& out_probs) {
  if (in_probs.rank() != 2 || out_probs.rank() != 2 || in_probs.dim(0) == 0 || out_probs.dim(0) == 0)
    throw std::invalid_argument("ood_metrics: both sets must be nonempty [n, C] arrays");
  auto pos = confidences(in_probs);
  auto neg = confidences(out_probs);
  OodMetrics m;
  for (double c : neg) m.mmc_out += c;
  m.mmc_out /= double(neg.size());

  // Mann-Whitney statistic with mid-ranks for ties.
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> all;
  for (double c : pos) all.push_back({c, true});
  for (double c : neg) all.push_back({c, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double mid = 0.5 * double(i + 1 + j);
    for (std::size_t t = i; t < j; ++t)
      if (all[t].positive) rank_sum += mid;
    i = j;
  }
  const double np = double(pos.size()), nn = double(neg.size());
  m.auroc = (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

  // Largest threshold that still keeps at least 95% of the positives.
  std::vector<double> sorted = pos;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t need = (95 * pos.size() + 99) / 100;
  const double threshold = sorted[need - 1];
  std::size_t fp = 0;
  for (double c : neg) fp += c >= threshold;
  m.fpr95 = double(fp) / nn;
  return m;
}

Tensor average_members(const Tensor& member_probs) {
  if (member_probs.rank() != 3) throw ShapeError("average_members: " + shape_string(member_probs.shape()));
  const std::size_t K = member_probs.dim(0), n = member_probs.dim(1), C = member_probs.dim(2);
  Tensor out({n, C});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < n * C; ++i) out[i] += member_probs[k * n * C + i];
  for (double& v : out.data()) v /= double(K);
  return out;
}

MetricReport evaluate_members(const Tensor& member_probs, std::span<const std::size_t> labels, std::size_t n_bins) {
  Tensor avg = average_members(member_probs);
  MetricReport r;
  auto basic = basic_metrics(avg, labels);
  r.nll = basic.nll;
  r.accuracy = basic.accuracy;
  r.brier = basic.brier;
  auto e = ece(avg, labels, n_bins);
  r.ece = e.ece;
  r.bins = std::move(e.bins);
  r.n = labels.size();
  const std::size_t K = member_probs.dim(0), n = member_probs.dim(1), C = member_probs.dim(2);
  if (K >= 2) {
    std::vector<std::vector<std::size_t>> preds;
    for (std::size_t k = 0; k < K; ++k) {
      Tensor one({n, C}, std::vector<double>(member_probs.data().begin() + k * n * C,
                                             member_probs.data().begin() + (k + 1) * n * C));
      preds.push_back(argmax_rows(one));
    }
    r.diversity = diversity(preds, r.accuracy);
  }
  return r;
}

}  // namespace hyperens
