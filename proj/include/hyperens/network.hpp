#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "hyperens/hyperdist.hpp"
#include "hyperens/layers.hpp"
#include "hyperens/persistence.hpp"

namespace hyperens {

struct ConvSpec {
  std::size_t channels = 8;
  std::size_t kernel = 3;
  ops::Padding padding = ops::Padding::same;
};

/// Convolutions (NHWC input), a flatten, dense hidden layers, then the output
/// layer. ReLU between layers; no activation on the output.
struct ModelSpec {
  Shape input_shape;  // {d} for vectors, {h, w, c} for images
  std::vector<ConvSpec> conv;
  std::vector<std::size_t> hidden;
  std::size_t outputs = 2;
  LayerKind kind = LayerKind::plain;
  std::size_t members = 1;
  bool bias = true;
  Rank1Init rank1_init = Rank1Init::normal_050;
  bool couple_uv_to_rs = false;
  bool regularize_rank1 = true;
  bool train_rank1 = true;
  EmbeddingConfig embedding;
};

/// A stack of EnsembleLayers sharing one schema. Hyperparameters reach the
/// layers three ways: normalized through the embeddings, as per-row L2
/// strengths, and as per-row dropout rates. Dropout entries bound to a layer
/// act on that layer's input; a global dropout entry acts on the input of the
/// output layer.
class Network {
 public:
  Network(const ModelSpec& spec, const HyperSchema& schema, const Rng& init);

  struct Pass {
    Var output;                // [N, outputs]
    std::optional<Var> l2;     // absent when nothing is regularized
  };

  /// x holds N rows; member[j] and lambda row j ([N, m] raw values) describe
  /// row j. When `z` is given it replaces the normalized lambda fed to the
  /// embeddings (the tuning step passes a reparametrized sample here).
  Pass forward(Tape& tape, const Tensor& x, std::span<const std::size_t> member, const Tensor& lambda,
               std::optional<Var> z, bool train, Rng* dropout_rng, bool with_l2);

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> state();
  std::size_t parameter_count();

  NamedArrays export_state();
  /// Arrays are matched by name; every state array must be present.
  void import_state(const NamedArrays& arrays);

  const ModelSpec& spec() const { return spec_; }
  const HyperSchema& schema() const { return schema_; }
  std::size_t members() const { return spec_.members; }
  std::size_t layer_count() const { return layers_.size(); }
  EnsembleLayer& layer(std::size_t i) { return *layers_[i]; }

  /// Schema entries used per layer; empty optionals mean "not used".
  struct LayerHypers {
    std::optional<std::size_t> dropout, l2_weights, l2_bias;
  };
  const LayerHypers& hypers(std::size_t i) const { return hypers_[i]; }

 private:
  ModelSpec spec_;
  HyperSchema schema_;
  std::vector<std::unique_ptr<EnsembleLayer>> layers_;
  std::vector<LayerHypers> hypers_;
  std::size_t conv_count_ = 0;
};

/// Normalized rows [N, m] for raw lambda rows.
Tensor normalize_rows(const HyperSchema& schema, const Tensor& lambda);

/// Eval-mode member outputs for every row of x with member k at lambda[k]:
/// probabilities [K, n, C] for classification (softmax applied) or raw
/// predictions [K, n, outputs] otherwise. Rows are processed in chunks.
Tensor predict_members(Network& net, const Tensor& x, std::span<const HyperVector> lambda, bool classification,
                       std::size_t chunk = 256);

/// Rows [from, to) of a batch-major tensor.
Tensor slice_rows(const Tensor& t, std::size_t from, std::size_t to);

}  // namespace hyperens
