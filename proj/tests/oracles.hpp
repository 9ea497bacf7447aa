#pragma once

// Straight-line reference implementations used by tests and the acceptance
// runner. Nothing here touches the tape.

#include <span>
#include <vector>

#include "hyperens/layers.hpp"
#include "hyperens/rng.hpp"

namespace oracle {

using hyperens::EnsembleLayer;
using hyperens::Tensor;

/// e(z) and e'(z) for one row, evaluated with loops.
std::pair<std::vector<double>, std::vector<double>> embed(const hyperens::Embedding& emb, std::span<const double> z);

/// W_k(lambda) with the same layout as W (last dim = output units). When
/// `with_rank1` is false the rank-1 factors are treated as ones.
std::vector<double> member_weight(const EnsembleLayer& layer, std::size_t k, std::span<const double> e,
                                  bool with_rank1 = true);
std::vector<double> member_bias(const EnsembleLayer& layer, std::size_t k, std::span<const double> e2);

/// Row-by-row forward with materialized weights. x is [N, in] or [N, h, w, cin];
/// z is [N, m] (ignored by unmodulated layers).
Tensor layer_forward(const EnsembleLayer& layer, const Tensor& x, std::span<const std::size_t> member, const Tensor& z);

/// Direct convolution of one image [h, w, cin] with a kernel [l, l, cin, cout].
std::vector<double> conv_single(std::span<const double> img, std::size_t h, std::size_t w, std::size_t cin,
                                std::span<const double> kernel, std::size_t l, std::size_t cout, bool same,
                                std::size_t* out_h, std::size_t* out_w);

/// (1/N) sum_j nu_w[j] ||W_k(lambda_j)||^2 + nu_b[j] ||b_k(lambda_j)||^2.
double l2_naive(const EnsembleLayer& layer, std::span<const std::size_t> member, const Tensor& z,
                std::span<const double> nu_w, std::span<const double> nu_b);

/// Fills every state parameter of a layer with random values.
void randomize(EnsembleLayer& layer, hyperens::Rng& rng, double scale = 0.5);
Tensor random_tensor(hyperens::Shape shape, hyperens::Rng& rng, double scale = 1.0);

/// Reference greedy selection with replacement, written independently of the
/// library: grow while strictly improving, cap unique members at K and the
/// length at 5K, ties to the lowest id. Returns chosen ids in order.
std::vector<std::size_t> greedy_reference(const std::vector<Tensor>& val_probs, std::span<const std::size_t> labels,
                                          std::size_t K);
/// Validation NLL of the uniform average over a multiset of models.
double multiset_nll(const std::vector<Tensor>& val_probs, std::span<const std::size_t> labels,
                    std::span<const std::size_t> ids);

}  // namespace oracle
