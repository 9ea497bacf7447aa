#include "hyperens/network.hpp"

#include <stdexcept>

namespace hyperens {

namespace o = ops;

Tensor normalize_rows(const HyperSchema& schema, const Tensor& lambda) {
  const std::size_t m = schema.size();
  if (lambda.rank() != 2 || lambda.dim(1) != m)
    throw ShapeError("normalize_rows: lambda " + shape_string(lambda.shape()) + " for " + std::to_string(m) + " entries");
  Tensor z(lambda.shape());
  for (std::size_t j = 0; j < lambda.dim(0); ++j)
    for (std::size_t d = 0; d < m; ++d) z[j * m + d] = schema.normalize(d, lambda[j * m + d]);
  return z;
}

Tensor slice_rows(const Tensor& t, std::size_t from, std::size_t to) {
  if (t.rank() == 0 || from > to || to > t.dim(0)) throw ShapeError("slice_rows: bad range");
  const std::size_t width = t.dim(0) == 0 ? 0 : t.size() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = to - from;
  return Tensor(shape, std::vector<double>(t.data().begin() + from * width, t.data().begin() + to * width));
}

Network::Network(const ModelSpec& spec, const HyperSchema& schema, const Rng& init) : spec_(spec), schema_(schema) {
  const bool images = spec.input_shape.size() == 3;
  if (!images && spec.input_shape.size() != 1) throw std::invalid_argument("model: input shape must be {d} or {h, w, c}");
  if (!images && !spec.conv.empty()) throw std::invalid_argument("model: convolutions need an image input shape");
  if (spec.outputs == 0) throw std::invalid_argument("model: zero outputs");
  if (has_modulation(spec.kind) && schema.size() == 0)
    throw std::invalid_argument("model: " + std::string(to_string(spec.kind)) + " layers need a hyperparameter schema");

  LayerConfig base;
  base.kind = spec.kind;
  base.members = spec.members;
  base.bias = spec.bias;
  base.rank1_init = spec.rank1_init;
  base.couple_uv_to_rs = spec.couple_uv_to_rs;
  base.regularize_rank1 = spec.regularize_rank1;
  base.train_rank1 = spec.train_rank1;
  base.embedding = spec.embedding;
  base.hyper_dims = schema.size();

  std::size_t h = images ? spec.input_shape[0] : 0, w = images ? spec.input_shape[1] : 0;
  std::size_t width = images ? spec.input_shape[2] : spec.input_shape[0];
  int index = 0;
  for (const auto& c : spec.conv) {
    LayerConfig cfg = base;
    cfg.conv = true;
    cfg.in = width;
    cfg.out = c.channels;
    cfg.kernel = c.kernel;
    cfg.padding = c.padding;
    layers_.push_back(std::make_unique<EnsembleLayer>(index++, cfg, init));
    if (c.padding == o::Padding::valid) {
      if (h < c.kernel || w < c.kernel) throw std::invalid_argument("model: image too small for a valid convolution");
      h -= c.kernel - 1;
      w -= c.kernel - 1;
    }
    width = c.channels;
  }
  conv_count_ = spec.conv.size();
  if (images) width *= h * w;
  std::vector<std::size_t> dense = spec.hidden;
  dense.push_back(spec.outputs);
  for (std::size_t units : dense) {
    LayerConfig cfg = base;
    cfg.in = width;
    cfg.out = units;
    layers_.push_back(std::make_unique<EnsembleLayer>(index++, cfg, init));
    width = units;
  }

  const int last = int(layers_.size()) - 1;
  for (int i = 0; i <= last; ++i) {
    LayerHypers lh;
    if (auto d = schema.dropout_index(i); d && (schema[*d].layer == i || i == last)) lh.dropout = d;
    if (schema.has_l2()) {
      lh.l2_weights = schema.l2_index(i, L2Part::weights);
      lh.l2_bias = schema.l2_index(i, L2Part::bias);
      if (!lh.l2_weights)
        throw SchemaError("schema has l2 entries but none covers the weights of layer " + std::to_string(i));
    }
    hypers_.push_back(lh);
  }
  for (const auto& d : schema.dims())
    if (d.layer > last)
      throw SchemaError("hyperparameter '" + d.name + "' refers to layer " + std::to_string(d.layer) + " of " +
                        std::to_string(last + 1));
}

Network::Pass Network::forward(Tape& tape, const Tensor& x, std::span<const std::size_t> member, const Tensor& lambda,
                               std::optional<Var> z, bool train, Rng* dropout_rng, bool with_l2) {
  const std::size_t N = member.size(), m = schema_.size();
  if (x.rank() == 0 || x.dim(0) != N) throw ShapeError("network: input rows do not match the member list");
  Shape expected = spec_.input_shape;
  expected.insert(expected.begin(), N);
  if (x.shape() != expected) throw ShapeError("network: input " + shape_string(x.shape()) + ", expected " + shape_string(expected));
  if (m > 0 && (lambda.rank() != 2 || lambda.dim(0) != N || lambda.dim(1) != m))
    throw ShapeError("network: lambda rows " + shape_string(lambda.shape()));
  if (has_modulation(spec_.kind) && !z) z = tape.constant(normalize_rows(schema_, lambda), "z");

  RowContext ctx{member, z};
  Pass pass;
  Var hcur = tape.constant(x, "x");
  std::vector<double> rates(N), nu_w, nu_b;
  auto column = [&](std::size_t d, std::vector<double>& out) {
    out.resize(N);
    for (std::size_t j = 0; j < N; ++j) out[j] = lambda[j * m + d];
  };
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& lh = hypers_[i];
    if (lh.dropout) {
      column(*lh.dropout, rates);
      if (train && !dropout_rng) throw std::invalid_argument("network: dropout in train mode needs an rng");
      hcur = train ? dropout(hcur, rates, true, *dropout_rng) : hcur;
    }
    auto bound = layers_[i]->bind(tape, ctx);
    hcur = layers_[i]->forward(bound, hcur);
    if (with_l2 && lh.l2_weights) {
      column(*lh.l2_weights, nu_w);
      if (lh.l2_bias && spec_.bias) column(*lh.l2_bias, nu_b);
      else nu_b.clear();
      Var term = layers_[i]->l2(tape, bound, ctx, nu_w, nu_b);
      pass.l2 = pass.l2 ? o::add(*pass.l2, term) : term;
    }
    if (i + 1 < layers_.size()) {
      hcur = o::relu(hcur);
      if (i + 1 == conv_count_) hcur = o::reshape(hcur, {N, hcur.value().size() / std::max<std::size_t>(N, 1)});
    }
  }
  pass.output = hcur;
  return pass;
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_)
    for (Parameter* p : l->parameters()) out.push_back(p);
  return out;
}

std::vector<Parameter*> Network::state() {
  std::vector<Parameter*> out;
  for (auto& l : layers_)
    for (Parameter* p : l->state()) out.push_back(p);
  return out;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (auto& l : layers_) n += l->parameter_count();
  return n;
}

NamedArrays Network::export_state() {
  NamedArrays out;
  for (Parameter* p : state()) out.emplace_back(p->name, p->value);
  return out;
}

void Network::import_state(const NamedArrays& arrays) {
  for (Parameter* p : state()) {
    const Tensor& t = find_array(arrays, p->name);
    if (t.shape() != p->value.shape())
      throw CheckpointError("array '" + p->name + "' has shape " + shape_string(t.shape()) + ", expected " +
                            shape_string(p->value.shape()));
    p->value = t;
    p->zero_grad();
  }
}

Tensor predict_members(Network& net, const Tensor& x, std::span<const HyperVector> lambda, bool classification,
                       std::size_t chunk) {
  const std::size_t K = net.members(), n = x.dim(0), m = net.schema().size();
  if (lambda.size() != K) throw ShapeError("predict_members: one lambda per member required");
  const std::size_t C = net.spec().outputs;
  Tensor out({K, n, C});
  chunk = std::max<std::size_t>(1, chunk);
  for (std::size_t from = 0; from < n; from += chunk) {
    const std::size_t to = std::min(n, from + chunk), b = to - from;
    TiledBatch tb = tile_minibatch(slice_rows(x, from, to), K);
    Tensor lam = m > 0 ? tile_hyper(lambda, b) : Tensor({K * b, 0});
    Tape tape(false);
    auto pass = net.forward(tape, tb.x, tb.member, lam, std::nullopt, false, nullptr, false);
    Var y = classification ? o::softmax(pass.output) : pass.output;
    const Tensor& v = y.value();
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t c = 0; c < C; ++c) out[(k * n + from + i) * C + c] = v[(k * b + i) * C + c];
  }
  return out;
}

}  // namespace hyperens
