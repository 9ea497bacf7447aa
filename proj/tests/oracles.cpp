#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace oracle {

using namespace hyperens;

std::pair<std::vector<double>, std::vector<double>> embed(const Embedding& emb, std::span<const double> z) {
  const std::size_t m = z.size();
  auto affine = [](std::span<const double> in, const Tensor& w, const Tensor* bias) {
    const std::size_t n = w.dim(1);
    std::vector<double> out(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      double s = bias ? (*bias)[j] : 0.0;
      for (std::size_t i = 0; i < in.size(); ++i) s += in[i] * w[i * n + j];
      out[j] = s;
    }
    return out;
  };
  if (emb.arch() == EmbeddingArch::linear) return {affine(z, emb.C.value, nullptr), affine(z, emb.C2.value, nullptr)};
  std::vector<double> h = affine(z, emb.A.value, &emb.a.value);
  for (double& v : h) v = std::tanh(v);
  (void)m;
  return {affine(h, emb.B.value, &emb.c.value), affine(h, emb.B2.value, &emb.c2.value)};
}

namespace {

const Tensor& u_of(const EnsembleLayer& L) { return L.config().couple_uv_to_rs ? L.r.value : L.u.value; }
const Tensor& v_of(const EnsembleLayer& L) { return L.config().couple_uv_to_rs ? L.s.value : L.v.value; }

}  // namespace

std::vector<double> member_weight(const EnsembleLayer& L, std::size_t k, std::span<const double> e, bool with_rank1) {
  const auto& cfg = L.config();
  const std::size_t in = cfg.in, out = cfg.out;
  const std::size_t taps = cfg.conv ? cfg.kernel * cfg.kernel : 1;
  const bool r1 = has_rank1(cfg.kind) && with_rank1, mod = has_modulation(cfg.kind);
  std::vector<double> w(L.W.value.size());
  for (std::size_t t = 0; t < taps; ++t)
    for (std::size_t p = 0; p < in; ++p)
      for (std::size_t q = 0; q < out; ++q) {
        const std::size_t idx = (t * in + p) * out + q;
        double val = L.W.value[idx] * (r1 ? L.r.value[k * in + p] * L.s.value[k * out + q] : 1.0);
        if (mod) {
          double f = r1 ? u_of(L)[k * in + p] * v_of(L)[k * out + q] : 1.0;
          val += L.delta.value[idx] * f * e[q];
        }
        w[idx] = val;
      }
  return w;
}

std::vector<double> member_bias(const EnsembleLayer& L, std::size_t k, std::span<const double> e2) {
  const std::size_t out = L.config().out;
  std::vector<double> b(out, 0.0);
  if (!L.config().bias) return b;
  for (std::size_t q = 0; q < out; ++q) {
    b[q] = L.b.value[k * out + q];
    if (has_modulation(L.config().kind)) b[q] += L.delta_b.value[k * out + q] * e2[q];
  }
  return b;
}

std::vector<double> conv_single(std::span<const double> img, std::size_t h, std::size_t w, std::size_t cin,
                                std::span<const double> kernel, std::size_t l, std::size_t cout, bool same,
                                std::size_t* out_h, std::size_t* out_w) {
  const long pad = same ? long(l - 1) / 2 : 0;
  const std::size_t oh = same ? h : h - l + 1, ow = same ? w : w - l + 1;
  std::vector<double> out(oh * ow * cout, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t co = 0; co < cout; ++co) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < l; ++dy)
          for (std::size_t dx = 0; dx < l; ++dx) {
            long iy = long(y + dy) - pad, ix = long(x + dx) - pad;
            if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci)
              s += img[(iy * w + ix) * cin + ci] * kernel[((dy * l + dx) * cin + ci) * cout + co];
          }
        out[(y * ow + x) * cout + co] = s;
      }
  *out_h = oh;
  *out_w = ow;
  return out;
}

Tensor layer_forward(const EnsembleLayer& L, const Tensor& x, std::span<const std::size_t> member, const Tensor& z) {
  const auto& cfg = L.config();
  const std::size_t N = x.dim(0);
  const bool mod = has_modulation(cfg.kind);
  std::vector<double> result;
  Shape shape;
  for (std::size_t j = 0; j < N; ++j) {
    std::vector<double> e(cfg.out, 0.0), e2(cfg.out, 0.0);
    if (mod) {
      std::span<const double> zrow(z.data().data() + j * z.dim(1), z.dim(1));
      std::tie(e, e2) = embed(L.embedding, zrow);
    }
    auto w = member_weight(L, member[j], e);
    auto b = member_bias(L, member[j], e2);
    if (!cfg.conv) {
      for (std::size_t q = 0; q < cfg.out; ++q) {
        double s = b[q];
        for (std::size_t p = 0; p < cfg.in; ++p) s += x[j * cfg.in + p] * w[p * cfg.out + q];
        result.push_back(s);
      }
      shape = {N, cfg.out};
    } else {
      const std::size_t h = x.dim(1), wd = x.dim(2), per = h * wd * cfg.in;
      std::size_t oh, ow;
      auto y = conv_single(std::span<const double>(x.data().data() + j * per, per), h, wd, cfg.in, w, cfg.kernel,
                           cfg.out, cfg.padding == ops::Padding::same, &oh, &ow);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i % cfg.out];
      result.insert(result.end(), y.begin(), y.end());
      shape = {N, oh, ow, cfg.out};
    }
  }
  return Tensor(shape, result);
}

double l2_naive(const EnsembleLayer& L, std::span<const std::size_t> member, const Tensor& z,
                std::span<const double> nu_w, std::span<const double> nu_b) {
  const auto& cfg = L.config();
  const std::size_t N = member.size();
  const bool mod = has_modulation(cfg.kind);
  double total = 0.0;
  for (std::size_t j = 0; j < N; ++j) {
    std::vector<double> e(cfg.out, 0.0), e2(cfg.out, 0.0);
    if (mod) std::tie(e, e2) = embed(L.embedding, std::span<const double>(z.data().data() + j * z.dim(1), z.dim(1)));
    if (!nu_w.empty()) {
      double sq = 0.0;
      for (double v : member_weight(L, member[j], e, cfg.regularize_rank1)) sq += v * v;
      total += nu_w[j] * sq;
    }
    if (!nu_b.empty() && cfg.bias) {
      double sq = 0.0;
      for (double v : member_bias(L, member[j], e2)) sq += v * v;
      total += nu_b[j] * sq;
    }
  }
  return total / double(N);
}

Tensor random_tensor(Shape shape, Rng& rng, double scale) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

void randomize(EnsembleLayer& layer, Rng& rng, double scale) {
  for (Parameter* p : layer.state())
    for (double& v : p->value.data()) v = rng.normal(0.0, scale);
}

double multiset_nll(const std::vector<Tensor>& val_probs, std::span<const std::size_t> labels,
                    std::span<const std::size_t> ids) {
  const std::size_t n = labels.size(), C = val_probs.at(0).dim(1);
  double nll = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = 0.0;
    for (std::size_t id : ids) p += val_probs[id][i * C + labels[i]];
    p /= double(ids.size());
    nll -= std::log(std::max(p, 1e-12));
  }
  return nll / double(n);
}

std::vector<std::size_t> greedy_reference(const std::vector<Tensor>& val_probs, std::span<const std::size_t> labels,
                                          std::size_t K) {
  std::vector<std::size_t> chosen;
  double best = std::numeric_limits<double>::infinity();
  while (chosen.size() < 5 * K) {
    std::set<std::size_t> unique(chosen.begin(), chosen.end());
    double cand_score = std::numeric_limits<double>::infinity();
    std::size_t cand = 0;
    bool found = false;
    for (std::size_t id = 0; id < val_probs.size(); ++id) {
      if (unique.size() >= K && !unique.count(id)) continue;
      std::vector<std::size_t> trial = chosen;
      trial.push_back(id);
      double sc = multiset_nll(val_probs, labels, trial);
      if (!found || sc < cand_score) {
        cand_score = sc;
        cand = id;
        found = true;
      }
    }
    if (!found || !(cand_score < best)) break;
    chosen.push_back(cand);
    best = cand_score;
  }
  return chosen;
}

}  // namespace oracle
