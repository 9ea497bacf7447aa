#include "hyperens/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hyperens::ops {

namespace {

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

std::string shapes(const Var& a, const Var& b) { return shape_string(a.shape()) + " vs " + shape_string(b.shape()); }

void accumulate(Tensor& dst, const Tensor& src) {
  auto& d = dst.data();
  const auto& s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Elementwise unary op from a value function and a derivative expressed
// through (x, y).
template <typename F, typename D>
Var unary(const char* name, Var x, F f, D dfdx) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  std::size_t xi = x.id;
  return x.tape->record(name, std::move(out), {xi}, [xi, dfdx](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  require(a.shape() == b.shape(), "add", shapes(a, b));
  Tensor out = a.value();
  accumulate(out, b.value());
  std::size_t ai = a.id, bi = b.id;
  return a.tape->record("add", std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) accumulate(t.grad(ai), g);
    if (t.requires_grad(bi)) accumulate(t.grad(bi), g);
  });
}

Var sub(Var a, Var b) {
  require(a.shape() == b.shape(), "sub", shapes(a, b));
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  std::size_t ai = a.id, bi = b.id;
  return a.tape->record("sub", std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) accumulate(t.grad(ai), g);
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require(a.shape() == b.shape(), "mul", shapes(a, b));
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  std::size_t ai = a.id, bi = b.id;
  return a.tape->record("mul", std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      const Tensor& bv = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      const Tensor& av = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var add_lastdim(Var x, Var v) {
  require(x.value().rank() >= 1 && v.value().rank() == 1 && x.shape().back() == v.dim(0), "add_lastdim", shapes(x, v));
  const std::size_t c = v.dim(0);
  Tensor out = x.value();
  const Tensor& vv = v.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vv[i % c];
  std::size_t xi = x.id, vi = v.id;
  return x.tape->record("add_lastdim", std::move(out), {xi, vi}, [xi, vi, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(xi)) accumulate(t.grad(xi), g);
    if (t.requires_grad(vi)) {
      Tensor& gv = t.grad(vi);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % c] += g[i];
    }
  });
}

Var mul_lastdim(Var x, Var v) {
  require(x.value().rank() >= 1 && v.value().rank() == 1 && x.shape().back() == v.dim(0), "mul_lastdim", shapes(x, v));
  const std::size_t c = v.dim(0);
  Tensor out = x.value();
  const Tensor& vv = v.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vv[i % c];
  std::size_t xi = x.id, vi = v.id;
  return x.tape->record("mul_lastdim", std::move(out), {xi, vi}, [xi, vi, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad(xi);
      const Tensor& vv = t.value(vi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * vv[i % c];
    }
    if (t.requires_grad(vi)) {
      Tensor& gv = t.grad(vi);
      const Tensor& xv = t.value(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % c] += g[i] * xv[i];
    }
  });
}

namespace {

// Shared broadcast layout for add_rows / mul_rows.
struct RowLayout {
  std::size_t rows, middle, channels;
};

RowLayout row_layout(const char* op, const Var& x, const Var& v) {
  const Shape& xs = x.shape();
  const Shape& vs = v.shape();
  require(xs.size() >= 2 && vs.size() == 2 && xs.front() == vs[0] && xs.back() == vs[1], op, shapes(x, v));
  RowLayout l{vs[0], 1, vs[1]};
  for (std::size_t i = 1; i + 1 < xs.size(); ++i) l.middle *= xs[i];
  return l;
}

}  // namespace

Var add_rows(Var x, Var v) {
  RowLayout l = row_layout("add_rows", x, v);
  Tensor out = x.value();
  const Tensor& vv = v.value();
  for (std::size_t i = 0; i < l.rows; ++i)
    for (std::size_t m = 0; m < l.middle; ++m)
      for (std::size_t c = 0; c < l.channels; ++c) out[(i * l.middle + m) * l.channels + c] += vv[i * l.channels + c];
  std::size_t xi = x.id, vi = v.id;
  return x.tape->record("add_rows", std::move(out), {xi, vi}, [xi, vi, l](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(xi)) accumulate(t.grad(xi), g);
    if (t.requires_grad(vi)) {
      Tensor& gv = t.grad(vi);
      for (std::size_t i = 0; i < l.rows; ++i)
        for (std::size_t m = 0; m < l.middle; ++m)
          for (std::size_t c = 0; c < l.channels; ++c) gv[i * l.channels + c] += g[(i * l.middle + m) * l.channels + c];
    }
  });
}

Var mul_rows(Var x, Var v) {
  RowLayout l = row_layout("mul_rows", x, v);
  Tensor out = x.value();
  const Tensor& vv = v.value();
  for (std::size_t i = 0; i < l.rows; ++i)
    for (std::size_t m = 0; m < l.middle; ++m)
      for (std::size_t c = 0; c < l.channels; ++c) out[(i * l.middle + m) * l.channels + c] *= vv[i * l.channels + c];
  std::size_t xi = x.id, vi = v.id;
  return x.tape->record("mul_rows", std::move(out), {xi, vi}, [xi, vi, l](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& vv = t.value(vi);
    const bool gx_needed = t.requires_grad(xi), gv_needed = t.requires_grad(vi);
    Tensor* gx = gx_needed ? &t.grad(xi) : nullptr;
    Tensor* gv = gv_needed ? &t.grad(vi) : nullptr;
    for (std::size_t i = 0; i < l.rows; ++i)
      for (std::size_t m = 0; m < l.middle; ++m)
        for (std::size_t c = 0; c < l.channels; ++c) {
          std::size_t xo = (i * l.middle + m) * l.channels + c, vo = i * l.channels + c;
          if (gx) (*gx)[xo] += g[xo] * vv[vo];
          if (gv) (*gv)[vo] += g[xo] * xv[xo];
        }
  });
}

namespace {

// c[n,m] += a[n,k] * b[k,m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + p * m;
      double* crow = c + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
}

// c[n,m] += a[n,k] * b[m,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * m + j] += s;
    }
}

// c[k,m] += a[n,k]^T * b[n,m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + i * m;
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
}

}  // namespace

Var matmul(Var a, Var b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(0), "matmul", shapes(a, b));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out({n, m});
  gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), n, k, m);
  std::size_t ai = a.id, bi = b.id;
  return a.tape->record("matmul", std::move(out), {ai, bi}, [ai, bi, n, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) gemm_nt(g.data().data(), t.value(bi).data().data(), t.grad(ai).data().data(), n, m, k);
    if (t.requires_grad(bi)) gemm_tn(t.value(ai).data().data(), g.data().data(), t.grad(bi).data().data(), n, k, m);
  });
}

Var matmul_nt(Var a, Var b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(1), "matmul_nt", shapes(a, b));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  Tensor out({n, m});
  gemm_nt(a.value().data().data(), b.value().data().data(), out.data().data(), n, k, m);
  std::size_t ai = a.id, bi = b.id;
  return a.tape->record("matmul_nt", std::move(out), {ai, bi}, [ai, bi, n, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    // dA = G B, dB = G^T A
    if (t.requires_grad(ai)) gemm_nn(g.data().data(), t.value(bi).data().data(), t.grad(ai).data().data(), n, m, k);
    if (t.requires_grad(bi)) gemm_tn(g.data().data(), t.value(ai).data().data(), t.grad(bi).data().data(), n, m, k);
  });
}

Var gather_rows(Var table, std::span<const std::size_t> index) {
  require(table.value().rank() == 2, "gather_rows", "table must be 2-d, got " + shape_string(table.shape()));
  const std::size_t rows = table.dim(0), c = table.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out({idx.size(), c});
  const Tensor& tv = table.value();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < rows, "gather_rows", "index " + std::to_string(idx[i]) + " out of range " + std::to_string(rows));
    std::copy_n(tv.data().begin() + idx[i] * c, c, out.data().begin() + i * c);
  }
  std::size_t ti = table.id;
  return table.tape->record("gather_rows", std::move(out), {ti}, [ti, idx = std::move(idx), c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad(ti);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gt[idx[i] * c + j] += g[i * c + j];
  });
}

namespace {

Var segment_reduce(const char* name, Var x, std::span<const std::size_t> segment, std::size_t num_segments,
                   bool average) {
  require(x.value().rank() == 2 && x.dim(0) == segment.size(), name,
          shape_string(x.shape()) + " with " + std::to_string(segment.size()) + " segment ids");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<std::size_t> seg(segment.begin(), segment.end());
  std::vector<double> weight(num_segments, 0.0);
  for (std::size_t s : seg) {
    require(s < num_segments, name, "segment id out of range");
    weight[s] += 1.0;
  }
  for (double& v : weight) v = !average ? 1.0 : v > 0 ? 1.0 / v : 0.0;
  Tensor out({num_segments, c});
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[seg[i] * c + j] += xv[i * c + j];
  for (std::size_t s = 0; s < num_segments; ++s)
    for (std::size_t j = 0; j < c; ++j) out[s * c + j] *= weight[s];
  std::size_t xi = x.id;
  return x.tape->record(name, std::move(out), {xi},
                        [xi, seg = std::move(seg), weight = std::move(weight), c](Tape& t, std::size_t self) {
                          const Tensor& g = t.grad(self);
                          Tensor& gx = t.grad(xi);
                          for (std::size_t i = 0; i < seg.size(); ++i)
                            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[seg[i] * c + j] * weight[seg[i]];
                        });
}

}  // namespace

Var segment_mean(Var x, std::span<const std::size_t> segment, std::size_t num_segments) {
  return segment_reduce("segment_mean", x, segment, num_segments, true);
}

Var segment_sum(Var x, std::span<const std::size_t> segment, std::size_t num_segments) {
  return segment_reduce("segment_sum", x, segment, num_segments, false);
}

Var relu(Var x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var tanh(Var x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var log_clamped(Var x, double floor) {
  return unary(
      "log_clamped", x, [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Var square(Var x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  std::size_t xi = x.id;
  return x.tape->record("sum", Tensor::scalar(s), {xi}, [xi](Tape& t, std::size_t self) {
    double g = t.grad(self)[0];
    for (double& v : t.grad(xi).data()) v += g;
  });
}

Var mean(Var x) {
  require(x.value().size() > 0, "mean", "empty input");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var sum_lastdim(Var x) {
  require(x.value().rank() == 2, "sum_lastdim", "expected 2-d input, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out({n});
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += xv[i * c + j];
  std::size_t xi = x.id;
  return x.tape->record("sum_lastdim", std::move(out), {xi}, [xi, n, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i];
  });
}

Var mean_axis0(Var x) {
  require(x.value().rank() >= 1 && x.dim(0) > 0, "mean_axis0", "bad input " + shape_string(x.shape()));
  const std::size_t k = x.dim(0);
  const std::size_t inner = x.value().size() / k;
  Shape rest(x.shape().begin() + 1, x.shape().end());
  Tensor out(rest);
  const Tensor& xv = x.value();
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t i = 0; i < inner; ++i) out[i] += xv[a * inner + i];
  const double inv = 1.0 / static_cast<double>(k);
  for (double& v : out.data()) v *= inv;
  std::size_t xi = x.id;
  return x.tape->record("mean_axis0", std::move(out), {xi}, [xi, k, inner, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t i = 0; i < inner; ++i) gx[a * inner + i] += g[i] * inv;
  });
}

Var reshape(Var x, Shape shape) {
  require(shape_size(shape) == x.value().size(), "reshape", shape_string(x.shape()) + " -> " + shape_string(shape));
  std::size_t xi = x.id;
  return x.tape->record("reshape", x.value().reshaped(std::move(shape)), {xi},
                        [xi](Tape& t, std::size_t self) { accumulate(t.grad(xi), t.grad(self)); });
}

Var conv2d(Var x, Var kernel, Padding padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  require(xs.size() == 4 && ks.size() == 4 && ks[0] == ks[1] && ks[2] == xs[3], "conv2d", shapes(x, kernel));
  const std::size_t b = xs[0], h = xs[1], w = xs[2], cin = xs[3];
  const std::size_t l = ks[0], cout = ks[3];
  const std::size_t pad = padding == Padding::same ? (l - 1) / 2 : 0;
  require(h + 2 * pad >= l && w + 2 * pad >= l, "conv2d", "kernel does not fit input " + shape_string(xs));
  const std::size_t ho = h + 2 * pad - l + 1, wo = w + 2 * pad - l + 1;

  // Visits every (output, kernel tap) pair with valid input coordinates.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
          for (std::size_t ky = 0; ky < l; ++ky) {
            long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < l; ++kx) {
              long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              std::size_t xo = ((n * h + iy) * w + ix) * cin;
              std::size_t ko = (ky * l + kx) * cin * cout;
              std::size_t oo = ((n * ho + oy) * wo + ox) * cout;
              fn(xo, ko, oo);
            }
          }
  };

  Tensor out({b, ho, wo, cout});
  const auto& xv = x.value().data();
  const auto& kv = kernel.value().data();
  auto& ov = out.data();
  for_each_tap([&](std::size_t xo, std::size_t ko, std::size_t oo) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      double xval = xv[xo + ci];
      for (std::size_t co = 0; co < cout; ++co) ov[oo + co] += xval * kv[ko + ci * cout + co];
    }
  });
  std::size_t xi = x.id, ki = kernel.id;
  return x.tape->record("conv2d", std::move(out), {xi, ki}, [xi, ki, for_each_tap, cin, cout](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).data();
    const auto& xv = t.value(xi).data();
    const auto& kv = t.value(ki).data();
    double* gx = t.requires_grad(xi) ? t.grad(xi).data().data() : nullptr;
    double* gk = t.requires_grad(ki) ? t.grad(ki).data().data() : nullptr;
    for_each_tap([&](std::size_t xo, std::size_t ko, std::size_t oo) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        double acc = 0.0;
        for (std::size_t co = 0; co < cout; ++co) {
          acc += g[oo + co] * kv[ko + ci * cout + co];
          if (gk) gk[ko + ci * cout + co] += g[oo + co] * xv[xo + ci];
        }
        if (gx) gx[xo + ci] += acc;
      }
    });
  });
}

Var softmax(Var logits) {
  require(logits.value().rank() == 2, "softmax", "expected [n,C], got " + shape_string(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor out({n, c});
  const Tensor& z = logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = *std::max_element(z.data().begin() + i * c, z.data().begin() + (i + 1) * c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += out[i * c + j] = std::exp(z[i * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  std::size_t zi = logits.id;
  return logits.tape->record("softmax", std::move(out), {zi}, [zi, n, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gz = t.grad(zi);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gz[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

Var softmax_xent(Var logits, const Tensor& targets) {
  require(logits.value().rank() == 2 && targets.shape() == logits.shape(), "softmax_xent",
          shape_string(logits.shape()) + " vs targets " + shape_string(targets.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  const Tensor& z = logits.value();
  Tensor probs({n, c});
  Tensor out({n});
  std::vector<double> target_mass(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = *std::max_element(z.data().begin() + i * c, z.data().begin() + (i + 1) * c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += probs[i * c + j] = std::exp(z[i * c + j] - mx);
    double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] /= s;
      double tv = targets[i * c + j];
      target_mass[i] += tv;
      if (tv != 0.0) out[i] -= tv * (z[i * c + j] - lse);
    }
  }
  std::size_t zi = logits.id;
  return logits.tape->record(
      "softmax_xent", std::move(out), {zi},
      [zi, n, c, probs = std::move(probs), targets, target_mass = std::move(target_mass)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gz = t.grad(zi);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gz[i * c + j] += g[i] * (target_mass[i] * probs[i * c + j] - targets[i * c + j]);
      });
}

Var pick(Var x, std::span<const std::size_t> labels) {
  require(x.value().rank() == 2 && x.dim(0) == labels.size(), "pick",
          shape_string(x.shape()) + " with " + std::to_string(labels.size()) + " labels");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    require(lab[i] < c, "pick", "label " + std::to_string(lab[i]) + " out of range");
    out[i] = x.value()[i * c + lab[i]];
  }
  std::size_t xi = x.id;
  return x.tape->record("pick", std::move(out), {xi}, [xi, lab = std::move(lab), c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < lab.size(); ++i) gx[i * c + lab[i]] += g[i];
  });
}

Var argmax_onehot(Var x) {
  require(x.value().rank() == 2, "argmax_onehot", "expected [n,C]");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out({n, c});
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (xv[i * c + j] > xv[i * c + best]) best = j;
    out[i * c + best] = 1.0;
  }
  return x.tape->record("argmax_onehot", std::move(out), {x.id}, nullptr, /*differentiable=*/false);
}

}  // namespace hyperens::ops
