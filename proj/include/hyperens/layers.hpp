#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hyperens/ops.hpp"
#include "hyperens/rng.hpp"

namespace hyperens {

/// plain: x W + b. batch_ensemble: rank-1 member factors on W. self_tuning:
/// additive modulation Delta scaled by an embedding of lambda. hyper_batch: both.
enum class LayerKind { plain, batch_ensemble, self_tuning, hyper_batch };

enum class Rank1Init { normal_050, normal_075, sign_050, sign_075, ones };
enum class EmbeddingArch { linear, mlp_tanh_64 };
/// zeros: the output layer of the embedding starts at zero.
enum class EmbeddingInit { random, zeros };

const char* to_string(LayerKind k);
const char* to_string(Rank1Init k);
const char* to_string(EmbeddingArch k);
const char* to_string(EmbeddingInit k);
LayerKind parse_layer_kind(const std::string& s);
Rank1Init parse_rank1_init(const std::string& s);
EmbeddingArch parse_embedding_arch(const std::string& s);
EmbeddingInit parse_embedding_init(const std::string& s);

bool has_rank1(LayerKind k);
bool has_modulation(LayerKind k);

struct EmbeddingConfig {
  EmbeddingArch arch = EmbeddingArch::linear;
  EmbeddingInit init = EmbeddingInit::random;
};

/// Maps normalized hyperparameters z [N, m] to e(z), e'(z) [N, out].
class Embedding {
 public:
  static constexpr std::size_t kHidden = 64;

  Embedding() = default;
  Embedding(const std::string& prefix, std::size_t m, std::size_t out, const EmbeddingConfig& cfg, const Rng& init);

  struct Output {
    Var e, e2;
  };
  Output forward(Tape& tape, Var z);

  std::vector<Parameter*> parameters();
  EmbeddingArch arch() const { return arch_; }
  std::size_t size() const;

  // linear: e = z C, e' = z C2.
  // mlp_tanh_64: h = tanh(z A + a), e = h B + c, e' = h B2 + c2.
  Parameter C, C2;
  Parameter A, a, B, c, B2, c2;

 private:
  EmbeddingArch arch_ = EmbeddingArch::linear;
};

struct LayerConfig {
  LayerKind kind = LayerKind::plain;
  bool conv = false;
  std::size_t in = 0;   // features, or input channels for conv
  std::size_t out = 0;  // units, or output channels for conv
  std::size_t kernel = 3;
  ops::Padding padding = ops::Padding::same;
  std::size_t members = 1;
  bool bias = true;
  bool couple_uv_to_rs = false;
  bool regularize_rank1 = true;
  bool train_rank1 = true;
  Rank1Init rank1_init = Rank1Init::normal_050;
  EmbeddingConfig embedding;
  std::size_t hyper_dims = 0;
};

/// Per-row context shared by all layers of one pass. Row j belongs to member
/// member[j]; z holds the normalized hyperparameters of each row.
struct RowContext {
  std::span<const std::size_t> member;
  std::optional<Var> z;
};

/// A dense or convolutional layer with K member slots. Row j uses
///   W_k = W o (r_k s_k^T) + [Delta o (u_k v_k^T)] o e(lambda_j)^T
///   b_k = b_k + delta_k o e'(lambda_j)
/// computed with rank-1 broadcasts only; no member weight matrix is formed.
class EnsembleLayer {
 public:
  EnsembleLayer(int index, const LayerConfig& cfg, const Rng& init);
  EnsembleLayer(const EnsembleLayer&) = delete;
  EnsembleLayer& operator=(const EnsembleLayer&) = delete;

  /// Parameter leaves and per-row gathers for one tape.
  struct Bound {
    std::size_t rows = 0;
    Var W, b, r, s, u, v, delta, delta_b;  // raw member tables
    Var R, S, U, V, Brow, Drow;            // gathered per row
    Var e, e2;
  };
  Bound bind(Tape& tape, const RowContext& ctx);
  Var forward(const Bound& bound, Var x) const;

  /// Mean over rows of nu_w[j] ||W_k(lambda_j)||^2 + nu_b[j] ||b_k(lambda_j)||^2.
  /// An empty span drops that part.
  Var l2(Tape& tape, const Bound& bound, const RowContext& ctx, std::span<const double> nu_w,
         std::span<const double> nu_b) const;

  /// Trainable parameters (frozen rank-1 factors excluded).
  std::vector<Parameter*> parameters() { return collect(true); }
  /// Everything that defines the layer, for checkpoints.
  std::vector<Parameter*> state() { return collect(false); }
  std::size_t parameter_count();

  const LayerConfig& config() const { return cfg_; }
  int index() const { return index_; }

  Parameter W, b, r, s, u, v, delta, delta_b;
  Embedding embedding;

 private:
  std::vector<Parameter*> collect(bool trainable_only);

  int index_;
  LayerConfig cfg_;
};

/// Inverted dropout with one rate per row. Identity in eval mode or when every
/// rate is zero. The mask is a constant; no gradient reaches the rates.
Var dropout(Var x, std::span<const double> rate_per_row, bool train, Rng& rng);

/// Stacks K copies of a batch; row j of the result is row (j mod b) of X and
/// belongs to member j div b.
struct TiledBatch {
  Tensor x;
  std::vector<std::size_t> member;
};
TiledBatch tile_minibatch(const Tensor& x, std::size_t members);
/// Per-row hyperparameters for a tiled batch: member k's vector repeated b times.
Tensor tile_hyper(std::span<const std::vector<double>> per_member, std::size_t batch);
/// [K*b, C] -> [K, b, C].
Tensor split_members(const Tensor& y, std::size_t members);
/// [K*b, C] -> [b, C] by averaging the member blocks.
Tensor untile_mean(const Tensor& y, std::size_t members);

}  // namespace hyperens
