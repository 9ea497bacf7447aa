#include "hyperens/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace hyperens {

namespace o = ops;

const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::plain: return "plain";
    case LayerKind::batch_ensemble: return "batch_ensemble";
    case LayerKind::self_tuning: return "self_tuning";
    case LayerKind::hyper_batch: return "hyper_batch";
  }
  return "?";
}

const char* to_string(Rank1Init k) {
  switch (k) {
    case Rank1Init::normal_050: return "normal_050";
    case Rank1Init::normal_075: return "normal_075";
    case Rank1Init::sign_050: return "sign_050";
    case Rank1Init::sign_075: return "sign_075";
    case Rank1Init::ones: return "ones";
  }
  return "?";
}

const char* to_string(EmbeddingArch k) { return k == EmbeddingArch::linear ? "linear" : "mlp_tanh_64"; }
const char* to_string(EmbeddingInit k) { return k == EmbeddingInit::random ? "random" : "zeros"; }

LayerKind parse_layer_kind(const std::string& s) {
  for (auto k : {LayerKind::plain, LayerKind::batch_ensemble, LayerKind::self_tuning, LayerKind::hyper_batch})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

Rank1Init parse_rank1_init(const std::string& s) {
  for (auto k : {Rank1Init::normal_050, Rank1Init::normal_075, Rank1Init::sign_050, Rank1Init::sign_075, Rank1Init::ones})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown rank-1 init '" + s + "'");
}

EmbeddingArch parse_embedding_arch(const std::string& s) {
  for (auto k : {EmbeddingArch::linear, EmbeddingArch::mlp_tanh_64})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown embedding '" + s + "'");
}

EmbeddingInit parse_embedding_init(const std::string& s) {
  for (auto k : {EmbeddingInit::random, EmbeddingInit::zeros})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown embedding init '" + s + "'");
}

bool has_rank1(LayerKind k) { return k == LayerKind::batch_ensemble || k == LayerKind::hyper_batch; }
bool has_modulation(LayerKind k) { return k == LayerKind::self_tuning || k == LayerKind::hyper_batch; }

namespace {

Tensor normal_tensor(Shape shape, Rng rng, double mean, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(mean, stddev);
  return t;
}

Tensor rank1_tensor(Shape shape, Rng rng, Rank1Init init) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) {
    switch (init) {
      case Rank1Init::normal_050: v = rng.normal(1.0, 0.5); break;
      case Rank1Init::normal_075: v = rng.normal(1.0, 0.75); break;
      case Rank1Init::sign_050: v = rng.bernoulli(0.5) ? 1.0 : -1.0; break;
      case Rank1Init::sign_075: v = rng.bernoulli(0.75) ? 1.0 : -1.0; break;
      case Rank1Init::ones: v = 1.0; break;
    }
  }
  return t;
}

}  // namespace

Embedding::Embedding(const std::string& prefix, std::size_t m, std::size_t out, const EmbeddingConfig& cfg,
                     const Rng& init)
    : arch_(cfg.arch) {
  if (m == 0) throw std::invalid_argument(prefix + ": embedding needs at least one hyperparameter");
  const bool zero_head = cfg.init == EmbeddingInit::zeros;
  auto head = [&](const std::string& name, Shape shape, double stddev) {
    return Parameter(prefix + name, zero_head ? Tensor(shape) : normal_tensor(shape, init.derive(name), 0.0, stddev));
  };
  if (arch_ == EmbeddingArch::linear) {
    const double sd = 1.0 / std::sqrt(double(m));
    C = head("C", {m, out}, sd);
    C2 = head("C2", {m, out}, sd);
  } else {
    A = Parameter(prefix + "A", normal_tensor({m, kHidden}, init.derive("A"), 0.0, 1.0 / std::sqrt(double(m))));
    a = Parameter(prefix + "a", Tensor({kHidden}));
    const double sd = 1.0 / std::sqrt(double(kHidden));
    B = head("B", {kHidden, out}, sd);
    B2 = head("B2", {kHidden, out}, sd);
    c = Parameter(prefix + "c", Tensor({out}));
    c2 = Parameter(prefix + "c2", Tensor({out}));
  }
}

Embedding::Output Embedding::forward(Tape& tape, Var z) {
  if (arch_ == EmbeddingArch::linear)
    return {o::matmul(z, tape.parameter(C)), o::matmul(z, tape.parameter(C2))};
  Var h = o::tanh(o::add_lastdim(o::matmul(z, tape.parameter(A)), tape.parameter(a)));
  return {o::add_lastdim(o::matmul(h, tape.parameter(B)), tape.parameter(c)),
          o::add_lastdim(o::matmul(h, tape.parameter(B2)), tape.parameter(c2))};
}

std::vector<Parameter*> Embedding::parameters() {
  if (arch_ == EmbeddingArch::linear) return {&C, &C2};
  return {&A, &a, &B, &c, &B2, &c2};
}

std::size_t Embedding::size() const {
  if (arch_ == EmbeddingArch::linear) return C.value.size() + C2.value.size();
  return A.value.size() + a.value.size() + B.value.size() + c.value.size() + B2.value.size() + c2.value.size();
}

EnsembleLayer::EnsembleLayer(int index, const LayerConfig& cfg, const Rng& init) : index_(index), cfg_(cfg) {
  const std::string prefix = "layer" + std::to_string(index) + "/";
  if (cfg.in == 0 || cfg.out == 0) throw std::invalid_argument(prefix + ": zero width");
  if (cfg.members == 0) throw std::invalid_argument(prefix + ": need at least one member");
  if (!has_rank1(cfg.kind) && cfg.members != 1)
    throw std::invalid_argument(prefix + ": " + to_string(cfg.kind) + " layers have a single member");
  const std::size_t K = cfg.members;
  const std::size_t fan_in = cfg.conv ? cfg.kernel * cfg.kernel * cfg.in : cfg.in;
  const Shape wshape = cfg.conv ? Shape{cfg.kernel, cfg.kernel, cfg.in, cfg.out} : Shape{cfg.in, cfg.out};
  auto key = [&](const char* name) { return init.derive("init/" + prefix + name); };

  W = Parameter(prefix + "W", normal_tensor(wshape, key("W"), 0.0, std::sqrt(2.0 / double(fan_in))));
  if (cfg.bias) b = Parameter(prefix + "b", Tensor({K, cfg.out}));
  if (has_rank1(cfg.kind)) {
    r = Parameter(prefix + "r", rank1_tensor({K, cfg.in}, key("r"), cfg.rank1_init));
    s = Parameter(prefix + "s", rank1_tensor({K, cfg.out}, key("s"), cfg.rank1_init));
    if (has_modulation(cfg.kind) && !cfg.couple_uv_to_rs) {
      u = Parameter(prefix + "u", rank1_tensor({K, cfg.in}, key("u"), cfg.rank1_init));
      v = Parameter(prefix + "v", rank1_tensor({K, cfg.out}, key("v"), cfg.rank1_init));
    }
  }
  if (has_modulation(cfg.kind)) {
    delta = Parameter(prefix + "delta", Tensor(wshape));
    if (cfg.bias) delta_b = Parameter(prefix + "delta_b", Tensor({K, cfg.out}));
    embedding = Embedding(prefix + "emb/", cfg.hyper_dims, cfg.out, cfg.embedding, key("emb"));
  }
}

EnsembleLayer::Bound EnsembleLayer::bind(Tape& tape, const RowContext& ctx) {
  const std::string where = "layer" + std::to_string(index_);
  for (std::size_t m : ctx.member)
    if (m >= cfg_.members) throw std::out_of_range(where + ": member index " + std::to_string(m) + " out of range");
  Bound bd;
  bd.rows = ctx.member.size();
  bd.W = tape.parameter(W);
  if (cfg_.bias) {
    bd.b = tape.parameter(b);
    bd.Brow = o::gather_rows(bd.b, ctx.member);
  }
  if (has_rank1(cfg_.kind)) {
    auto bind_factor = [&](Parameter& p) { return cfg_.train_rank1 ? tape.parameter(p) : tape.constant(p.value, p.name); };
    bd.r = bind_factor(r);
    bd.s = bind_factor(s);
    bd.R = o::gather_rows(bd.r, ctx.member);
    bd.S = o::gather_rows(bd.s, ctx.member);
    if (has_modulation(cfg_.kind)) {
      if (cfg_.couple_uv_to_rs) {
        bd.u = bd.r;
        bd.v = bd.s;
        bd.U = bd.R;
        bd.V = bd.S;
      } else {
        bd.u = bind_factor(u);
        bd.v = bind_factor(v);
        bd.U = o::gather_rows(bd.u, ctx.member);
        bd.V = o::gather_rows(bd.v, ctx.member);
      }
    }
  }
  if (has_modulation(cfg_.kind)) {
    if (!ctx.z) throw std::invalid_argument(where + ": modulated layer needs hyperparameter rows");
    const Shape& zs = ctx.z->shape();
    if (zs.size() != 2 || zs[0] != ctx.member.size() || zs[1] != cfg_.hyper_dims)
      throw ShapeError(where + ": hyperparameter rows " + shape_string(zs));
    bd.delta = tape.parameter(delta);
    if (cfg_.bias) {
      bd.delta_b = tape.parameter(delta_b);
      bd.Drow = o::gather_rows(bd.delta_b, ctx.member);
    }
    auto emb = embedding.forward(tape, *ctx.z);
    bd.e = emb.e;
    bd.e2 = emb.e2;
  }
  return bd;
}

Var EnsembleLayer::forward(const Bound& bd, Var x) const {
  const bool rank1 = has_rank1(cfg_.kind), mod = has_modulation(cfg_.kind);
  auto linear = [&](Var in, Var w) { return cfg_.conv ? o::conv2d(in, w, cfg_.padding) : o::matmul(in, w); };
  auto scale_in = [&](Var in, Var f) { return cfg_.conv ? o::mul_rows(in, f) : o::mul(in, f); };
  if (x.dim(0) != bd.rows)
    throw ShapeError("layer" + std::to_string(index_) + ": batch rows do not match the row context");

  Var y = rank1 ? scale_in(linear(scale_in(x, bd.R), bd.W), bd.S) : linear(x, bd.W);
  if (mod) {
    Var xm = rank1 ? scale_in(x, bd.U) : x;
    Var gate = rank1 ? o::mul(bd.V, bd.e) : bd.e;
    y = o::add(y, scale_in(linear(xm, bd.delta), gate));
  }
  if (cfg_.bias) {
    auto add_in = [&](Var a, Var row) { return cfg_.conv ? o::add_rows(a, row) : o::add(a, row); };
    y = add_in(y, bd.Brow);
    if (mod) y = add_in(y, o::mul(bd.Drow, bd.e2));
  }
  return y;
}

Var EnsembleLayer::l2(Tape& tape, const Bound& bd, const RowContext& ctx, std::span<const double> nu_w,
                      std::span<const double> nu_b) const {
  const std::size_t N = ctx.member.size(), K = cfg_.members, in = cfg_.in, out = cfg_.out;
  const std::string where = "layer" + std::to_string(index_);
  if (N == 0) throw std::invalid_argument(where + ": l2 over an empty batch");
  if ((!nu_w.empty() && nu_w.size() != N) || (!nu_b.empty() && nu_b.size() != N))
    throw ShapeError(where + ": one l2 strength per row required");
  const bool mod = has_modulation(cfg_.kind);
  const bool rank1 = has_rank1(cfg_.kind) && cfg_.regularize_rank1;

  // Row and member weights nu_j / N, broadcast over output units.
  auto row_weights = [&](std::span<const double> nu) {
    Tensor t({N, out});
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t c = 0; c < out; ++c) t[j * out + c] = nu[j] / double(N);
    return tape.constant(std::move(t), "l2_row_weights");
  };
  auto member_weights = [&](std::span<const double> nu) {
    Tensor t({K, out});
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t c = 0; c < out; ++c) t[ctx.member[j] * out + c] += nu[j] / double(N);
    return tape.constant(std::move(t), "l2_member_weights");
  };
  // Sums a [l,l,in,out] kernel quantity over its spatial dims.
  auto to_matrix = [&](Var q) {
    if (!cfg_.conv) return q;
    const std::size_t taps = cfg_.kernel * cfg_.kernel;
    Var m = o::mean_axis0(o::reshape(q, {taps, in * out}));
    return o::reshape(o::scale(m, double(taps)), {in, out});
  };
  Var ones_in = tape.constant(Tensor({K, in}, 1.0));
  Var ones_out = tape.constant(Tensor({K, out}, 1.0));
  auto quad = [&](Var left, Var mat, Var right, Var weight) {
    return o::sum(o::mul(o::mul(o::matmul(left, mat), right), weight));
  };

  Var total = tape.constant(Tensor::scalar(0.0));
  if (!nu_w.empty()) {
    Var R2 = rank1 ? o::square(bd.r) : ones_in;
    Var S2 = rank1 ? o::square(bd.s) : ones_out;
    total = o::add(total, quad(R2, to_matrix(o::square(bd.W)), S2, member_weights(nu_w)));
    if (mod) {
      Var nw = row_weights(nu_w);
      Var first = o::segment_sum(o::mul(bd.e, nw), ctx.member, K);
      Var second = o::segment_sum(o::mul(o::square(bd.e), nw), ctx.member, K);
      Var RU = rank1 ? o::mul(bd.r, bd.u) : ones_in;
      Var SV = rank1 ? o::mul(bd.s, bd.v) : ones_out;
      Var U2 = rank1 ? o::square(bd.u) : ones_in;
      Var V2 = rank1 ? o::square(bd.v) : ones_out;
      total = o::add(total, o::scale(quad(RU, to_matrix(o::mul(bd.W, bd.delta)), SV, first), 2.0));
      total = o::add(total, quad(U2, to_matrix(o::square(bd.delta)), V2, second));
    }
  }
  if (!nu_b.empty() && cfg_.bias) {
    total = o::add(total, o::sum(o::mul(o::square(bd.b), member_weights(nu_b))));
    if (mod) {
      Var nb = row_weights(nu_b);
      Var first = o::segment_sum(o::mul(bd.e2, nb), ctx.member, K);
      Var second = o::segment_sum(o::mul(o::square(bd.e2), nb), ctx.member, K);
      total = o::add(total, o::scale(o::sum(o::mul(o::mul(bd.b, bd.delta_b), first)), 2.0));
      total = o::add(total, o::sum(o::mul(o::square(bd.delta_b), second)));
    }
  }
  return total;
}

std::vector<Parameter*> EnsembleLayer::collect(bool trainable_only) {
  std::vector<Parameter*> out{&W};
  if (cfg_.bias) out.push_back(&b);
  if (has_rank1(cfg_.kind) && (cfg_.train_rank1 || !trainable_only)) {
    out.push_back(&r);
    out.push_back(&s);
    if (has_modulation(cfg_.kind) && !cfg_.couple_uv_to_rs) {
      out.push_back(&u);
      out.push_back(&v);
    }
  }
  if (has_modulation(cfg_.kind)) {
    out.push_back(&delta);
    if (cfg_.bias) out.push_back(&delta_b);
    for (Parameter* p : embedding.parameters()) out.push_back(p);
  }
  return out;
}

std::size_t EnsembleLayer::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : state()) n += p->value.size();
  return n;
}

Var dropout(Var x, std::span<const double> rate_per_row, bool train, Rng& rng) {
  const std::size_t rows = x.dim(0);
  if (rate_per_row.size() != rows) throw ShapeError("dropout: one rate per row required");
  bool any = false;
  for (double p : rate_per_row) {
    if (!(p >= 0.0 && p <= 0.95)) throw std::invalid_argument("dropout: rate " + std::to_string(p) + " outside [0, 0.95]");
    any = any || p > 0.0;
  }
  if (!train || !any) return x;
  Tensor mask(x.shape());
  const std::size_t width = x.value().size() / rows;
  for (std::size_t j = 0; j < rows; ++j) {
    const double keep = 1.0 / (1.0 - rate_per_row[j]);
    for (std::size_t c = 0; c < width; ++c) mask[j * width + c] = rng.uniform() >= rate_per_row[j] ? keep : 0.0;
  }
  return o::mul(x, x.tape->constant(std::move(mask), "dropout_mask"));
}

TiledBatch tile_minibatch(const Tensor& x, std::size_t members) {
  if (x.rank() == 0 || x.dim(0) == 0) throw ShapeError("tile_minibatch: empty batch");
  if (members == 0) throw std::invalid_argument("tile_minibatch: need at least one member");
  const std::size_t b = x.dim(0);
  Shape shape = x.shape();
  shape[0] = b * members;
  TiledBatch out{Tensor(shape), std::vector<std::size_t>(b * members)};
  const std::size_t n = x.size();
  for (std::size_t k = 0; k < members; ++k) {
    std::copy(x.data().begin(), x.data().end(), out.x.data().begin() + k * n);
    for (std::size_t i = 0; i < b; ++i) out.member[k * b + i] = k;
  }
  return out;
}

Tensor tile_hyper(std::span<const std::vector<double>> per_member, std::size_t batch) {
  if (per_member.empty()) throw std::invalid_argument("tile_hyper: no members");
  const std::size_t m = per_member[0].size();
  Tensor out({per_member.size() * batch, m});
  for (std::size_t k = 0; k < per_member.size(); ++k) {
    if (per_member[k].size() != m) throw ShapeError("tile_hyper: members disagree on dimension");
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t d = 0; d < m; ++d) out[(k * batch + i) * m + d] = per_member[k][d];
  }
  return out;
}

Tensor split_members(const Tensor& y, std::size_t members) {
  if (y.rank() != 2 || y.dim(0) % members != 0) throw ShapeError("split_members: " + shape_string(y.shape()));
  return y.reshaped({members, y.dim(0) / members, y.dim(1)});
}

Tensor untile_mean(const Tensor& y, std::size_t members) {
  Tensor split = split_members(y, members);
  const std::size_t b = split.dim(1), c = split.dim(2);
  Tensor out({b, c});
  for (std::size_t k = 0; k < members; ++k)
    for (std::size_t i = 0; i < b * c; ++i) out[i] += split[k * b * c + i];
  for (double& v : out.data()) v /= double(members);
  return out;
}

}  // namespace hyperens
