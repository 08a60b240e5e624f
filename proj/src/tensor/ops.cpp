#include "vitpose/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "vitpose/flops.hpp"
#include "vitpose/kernels.hpp"

namespace vitpose::ops {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

// ---- broadcasting ---------------------------------------------------------

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per output axis, 0 on broadcast axes
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(r - a.size());
    const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(r - b.size());
    const std::size_t da = ia >= 0 ? a[ia] : 1;
    const std::size_t db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(da, db);
    if (ia >= 0 && da != 1) p.stride_a[i] = sa[ia];
    if (ib >= 0 && db != 1) p.stride_b[i] = sb[ib];
  }
  return p;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t n = shape_numel(p.out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * idx[d];
      ib -= p.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp kind, const char* name) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), name);
  Tensor out(plan.out);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const bool same = a.shape() == b.shape();
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinOp::add:
        return x + y;
      case BinOp::sub:
        return x - y;
      default:
        return x * y;
    }
  };
  if (same) {
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = apply(pa[i], pb[i]);
  } else {
    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = apply(pa[ia], pb[ib]); });
  }
  check_finite(out, name);
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, plan, kind, same]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      const bool need_a = a.requires_grad(), need_b = b.requires_grad();
      std::span<double> ga, gb;
      if (need_a) ga = a.grad();
      if (need_b) gb = b.grad();
      const double* va = a.data();
      const double* vb = b.data();
      auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
        const double g = gy[i];
        switch (kind) {
          case BinOp::add:
            if (need_a) ga[ia] += g;
            if (need_b) gb[ib] += g;
            break;
          case BinOp::sub:
            if (need_a) ga[ia] += g;
            if (need_b) gb[ib] -= g;
            break;
          case BinOp::mul:
            if (need_a) ga[ia] += g * vb[ib];
            if (need_b) gb[ib] += g * va[ia];
            break;
        }
      };
      if (same) {
        for (std::size_t i = 0; i < gy.size(); ++i) step(i, i, i);
      } else {
        for_each_broadcast(plan, step);
      }
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < x.numel(); ++i) po[i] = fwd(px[i]);
  check_finite(out, name);
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, bwd]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      const double* px = x.data();
      const double* py = out.data();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * bwd(px[i], py[i]);
    });
  }
  return out;
}

// Splits shape around an axis into outer * n * inner.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  require(axis < s.size(), "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

// ---- im2col geometry ------------------------------------------------------

struct ConvGeom {
  std::size_t c, h, w, kh, kw, sh, sw, ph, pw, oh, ow;
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t npos = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * npos;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.sh + ki) - static_cast<std::ptrdiff_t>(g.ph);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.sw + kj) - static_cast<std::ptrdiff_t>(g.pw);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* x) {
  const std::size_t npos = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * npos;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.sh + ki) - static_cast<std::ptrdiff_t>(g.ph);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.sw + kj) - static_cast<std::ptrdiff_t>(g.pw);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  const BroadcastPlan plan = plan_broadcast(x.shape(), shape, "broadcast_to");
  require(plan.out == shape, "broadcast_to: " + shape_str(x.shape()) + " does not broadcast to " + shape_str(shape));
  Tensor out(shape);
  const double* px = x.data();
  double* po = out.data();
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { po[i] = px[ia]; });
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, plan]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { gx[ia] += gy[i]; });
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (out.grad_view().empty()) return;
      const double g = out.grad_view()[0];
      for (double& v : x.grad()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (shape.empty()) shape.push_back(1);
  }
  Tensor out(shape);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.n; ++k) {
      const double* src = px + (o * s.n + k) * s.inner;
      double* dst = po + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, s]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.n; ++k) {
          for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.n + k) * s.inner + i] += gy[o * s.inner + i];
        }
      }
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  kernels::gemm(false, false, m, n, k, a.data(), k, b.data(), n, out.data(), n, false);
  record_macs(static_cast<std::uint64_t>(m) * k * n);
  check_finite(out, "matmul");
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, k, n]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      if (a.requires_grad()) kernels::gemm(false, true, m, k, n, gy.data(), n, b.data(), n, a.grad().data(), k, true);
      if (b.requires_grad()) kernels::gemm(true, false, k, n, m, a.data(), k, gy.data(), n, b.grad().data(), n, true);
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
          "bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  require((trans_b ? b.dim(2) : b.dim(1)) == k,
          "bmm: inner dimension mismatch " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Tensor out(Shape{batch, m, n});
  const std::size_t sa = m * k, sb = k * n, sc = m * n;
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm(false, trans_b, m, n, k, a.data() + i * sa, k, b.data() + i * sb, trans_b ? k : n,
                  out.data() + i * sc, n, false);
  }
  record_macs(static_cast<std::uint64_t>(batch) * m * k * n);
  check_finite(out, "bmm");
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, batch, m, k, n, trans_b]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      const std::size_t sa = m * k, sb = k * n, sc = m * n;
      for (std::size_t i = 0; i < batch; ++i) {
        const double* g = gy.data() + i * sc;
        if (a.requires_grad()) {
          // dA = G * op(B)^T
          kernels::gemm(false, !trans_b, m, k, n, g, n, b.data() + i * sb, trans_b ? k : n, a.grad().data() + i * sa, k,
                        true);
        }
        if (b.requires_grad()) {
          if (trans_b) {
            // B is [n,k]: dB = G^T * A
            kernels::gemm(true, false, n, k, m, g, n, a.data() + i * sa, k, b.grad().data() + i * sb, k, true);
          } else {
            kernels::gemm(true, false, k, n, m, a.data() + i * sa, k, g, n, b.grad().data() + i * sb, n, true);
          }
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require(w.rank() == 2 && x.shape().back() == w.dim(0),
          "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  const std::size_t in = w.dim(0), outc = w.dim(1);
  const std::size_t rows = x.numel() / in;
  if (bias.defined()) {
    require(bias.numel() == outc, "linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(outc) + " outputs");
  }
  Shape shape = x.shape();
  shape.back() = outc;
  Tensor out(shape);
  double* po = out.data();
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data(), bias.data() + outc, po + r * outc);
  }
  kernels::gemm(false, false, rows, outc, in, x.data(), in, w.data(), outc, po, outc, bias.defined());
  record_macs(static_cast<std::uint64_t>(rows) * in * outc);
  check_finite(out, "linear");
  if (Tape* tape = recording_tape({&x, &w, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, w, bias, out, rows, in, outc]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      if (x.requires_grad()) kernels::gemm(false, true, rows, in, outc, gy.data(), outc, w.data(), outc, x.grad().data(), in, true);
      if (w.requires_grad()) kernels::gemm(true, false, in, outc, rows, x.data(), in, gy.data(), outc, w.grad().data(), outc, true);
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < outc; ++j) gb[j] += gy[r * outc + j];
        }
      }
    });
  }
  return out;
}

// ---- normalisation --------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.shape().back();
  require(gamma.numel() == c && beta.numel() == c,
          "layer_norm: channel mismatch, input " + shape_str(x.shape()) + " gamma " + shape_str(gamma.shape()));
  const std::size_t rows = x.numel() / c;
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel()), rstd(rows);
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * rstd[r];
      xhat[r * c + j] = h;
      po[r * c + j] = h * pg[j] + pb[j];
    }
  }
  check_finite(out, "layer_norm");
  if (Tape* tape = recording_tape({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape->record([x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, c]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      const double* pg = gamma.data();
      if (gamma.requires_grad() || beta.requires_grad()) {
        std::span<double> gg, gbt;
        if (gamma.requires_grad()) gg = gamma.grad();
        if (beta.requires_grad()) gbt = beta.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < c; ++j) {
            if (!gg.empty()) gg[j] += gy[r * c + j] * xhat[r * c + j];
            if (!gbt.empty()) gbt[j] += gy[r * c + j];
          }
        }
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        std::vector<double> dh(c);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            dh[j] = gy[r * c + j] * pg[j];
            m1 += dh[j];
            m2 += dh[j] * xhat[r * c + j];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += rstd[r] * (dh[j] - m1 - xhat[r * c + j] * m2);
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = px[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, px[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const double e = std::exp(px[base + k * s.inner] - mx);
        po[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) po[base + k * s.inner] /= z;
    }
  }
  check_finite(out, "softmax");
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, s]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      const double* py = out.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.n * s.inner + i;
          double dotp = 0.0;
          for (std::size_t k = 0; k < s.n; ++k) dotp += gy[base + k * s.inner] * py[base + k * s.inner];
          for (std::size_t k = 0; k < s.n; ++k) {
            const std::size_t idx = base + k * s.inner;
            gx[idx] += py[idx] * (gy[idx] - dotp);
          }
        }
      }
    });
  }
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean, Tensor& running_var,
                  bool training, double momentum, double eps) {
  require(x.rank() == 4, "batch_norm expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c && running_var.numel() == c,
          "batch_norm: channel mismatch for " + shape_str(x.shape()));
  const std::size_t count = n * hw;
  std::vector<double> mu(c), rstd(c);
  const double* px = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double m = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = px + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) m += p[i];
      }
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = px + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / static_cast<double>(count);
      mu[ch] = m;
      rstd[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      running_mean.data()[ch] = (1.0 - momentum) * running_mean.data()[ch] + momentum * m;
      running_var.data()[ch] = (1.0 - momentum) * running_var.data()[ch] + momentum * unbiased;
    } else {
      mu[ch] = running_mean.data()[ch];
      rstd[ch] = 1.0 / std::sqrt(running_var.data()[ch] + eps);
    }
  }
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  double* po = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double h = (px[off + i] - mu[ch]) * rstd[ch];
        xhat[off + i] = h;
        po[off + i] = h * gamma.data()[ch] + beta.data()[ch];
      }
    }
  }
  check_finite(out, "batch_norm");
  if (Tape* tape = recording_tape({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape->record([x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), n, c, hw, training]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      const double cnt = static_cast<double>(n * hw);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sg = 0.0, sgh = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sg += gy[off + i];
            sgh += gy[off + i] * xhat[off + i];
          }
        }
        if (gamma.requires_grad()) gamma.grad()[ch] += sgh;
        if (beta.requires_grad()) beta.grad()[ch] += sg;
        if (!x.requires_grad()) continue;
        auto gx = x.grad();
        const double g = gamma.data()[ch];
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            if (training) {
              gx[off + i] += g * rstd[ch] * (gy[off + i] - sg / cnt - xhat[off + i] * sgh / cnt);
            } else {
              gx[off + i] += g * rstd[ch] * gy[off + i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  require(shape_numel(shape) == x.numel(), "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor out(shape, std::vector<double>(x.values().begin(), x.values().end()));
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  require(order.size() == r, "permute: order length does not match " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    require(o < r && !seen[o], "permute: invalid axis order for " + shape_str(x.shape()));
    seen[o] = true;
  }
  Shape shape(r);
  const auto in_strides = contiguous_strides(x.shape());
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    shape[i] = x.dim(order[i]);
    src_stride[i] = in_strides[order[i]];
  }
  Tensor out(shape);
  std::vector<std::size_t> map(out.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < map.size(); ++i) {
      map[i] = src;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        src += src_stride[d];
        if (idx[d] < shape[d]) break;
        src -= src_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < map.size(); ++i) po[i] = px[map[i]];
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, map = std::move(map)]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += gy[i];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  Shape shape = parts.front().shape();
  require(axis < shape.size(), "concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == shape.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d) {
      require(d == axis || p.dim(d) == shape[d],
              "concat: shape " + shape_str(p.shape()) + " incompatible with " + shape_str(shape));
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  Tensor out(shape);
  double* po = out.data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    offsets.push_back(offset);
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(p.data() + o * len * s.inner, len * s.inner, po + (o * total + offset) * s.inner);
    }
    offset += len;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && active_tape()) {
    out.set_requires_grad(true);
    active_tape()->record([parts, out, offsets, s, total, axis]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor& p = parts[pi];
        if (!p.requires_grad()) continue;
        const std::size_t len = p.dim(axis);
        auto gp = p.grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < len * s.inner; ++i) gp[o * len * s.inner + i] += gy[(o * total + offsets[pi]) * s.inner + i];
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis(x.shape(), axis);
  require(length > 0 && start + length <= s.n,
          "slice: [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape[axis] = length;
  Tensor out(shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data() + (o * s.n + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, s, start, length]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < length * s.inner; ++i) gx[(o * s.n + start) * s.inner + i] += gy[o * length * s.inner + i];
      }
    });
  }
  return out;
}

Tensor roll(const Tensor& x, std::size_t axis, std::ptrdiff_t shift) {
  const AxisSplit s = split_axis(x.shape(), axis);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(s.n);
  const std::size_t sh = static_cast<std::size_t>(((shift % n) + n) % n);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.n; ++k) {
      const std::size_t dst = (k + sh) % s.n;
      std::copy_n(x.data() + (o * s.n + k) * s.inner, s.inner, out.data() + (o * s.n + dst) * s.inner);
    }
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, s, sh]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t dst = (k + sh) % s.n;
          for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.n + k) * s.inner + i] += gy[(o * s.n + dst) * s.inner + i];
        }
      }
    });
  }
  return out;
}

Tensor pad_axis(const Tensor& x, std::size_t axis, std::size_t before, std::size_t after) {
  if (before == 0 && after == 0) return x;
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = s.n + before + after;
  const std::size_t total = shape[axis];
  Tensor out(shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data() + o * s.n * s.inner, s.n * s.inner, out.data() + (o * total + before) * s.inner);
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, s, before, total]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.n * s.inner; ++i) gx[o * s.n * s.inner + i] += gy[(o * total + before) * s.inner + i];
      }
    });
  }
  return out;
}

Tensor index_select(const Tensor& x, const std::vector<std::size_t>& index) {
  require(x.rank() >= 1 && !index.empty(), "index_select: empty selection");
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.numel() / rows;
  Shape shape = x.shape();
  shape[0] = index.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < rows, "index_select: index " + std::to_string(index[i]) + " out of range");
    std::copy_n(x.data() + index[i] * width, width, out.data() + i * width);
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, index, width]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < index.size(); ++i) {
        for (std::size_t j = 0; j < width; ++j) gx[index[i] * width + j] += gy[i * width + j];
      }
    });
  }
  return out;
}

// ---- spatial --------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dOptions opt) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1),
          "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  require(opt.stride_h > 0 && opt.stride_w > 0, "conv2d: stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(h + 2 * opt.pad_h >= kh && wd + 2 * opt.pad_w >= kw,
          "conv2d: kernel " + shape_str(w.shape()) + " yields empty output for input " + shape_str(x.shape()));
  if (b.defined()) require(b.numel() == o, "conv2d: bias size mismatch");
  ConvGeom g{c, h, wd, kh, kw, opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w,
             (h + 2 * opt.pad_h - kh) / opt.stride_h + 1, (wd + 2 * opt.pad_w - kw) / opt.stride_w + 1};
  const std::size_t ckk = c * kh * kw, npos = g.oh * g.ow;
  Tensor out(Shape{n, o, g.oh, g.ow});
  std::vector<double> cols(ckk * npos);
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.data() + i * c * h * wd, g, cols.data());
    double* dst = out.data() + i * o * npos;
    if (b.defined()) {
      for (std::size_t oc = 0; oc < o; ++oc) std::fill_n(dst + oc * npos, npos, b.data()[oc]);
    }
    kernels::gemm(false, false, o, npos, ckk, w.data(), ckk, cols.data(), npos, dst, npos, b.defined());
  }
  record_macs(static_cast<std::uint64_t>(n) * o * ckk * npos);
  check_finite(out, "conv2d");
  if (Tape* tape = recording_tape({&x, &w, &b})) {
    out.set_requires_grad(true);
    tape->record([x, w, b, out, g, n, o]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      const std::size_t ckk = g.c * g.kh * g.kw, npos = g.oh * g.ow, in_sz = g.c * g.h * g.w;
      std::vector<double> cols(ckk * npos);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = gy.data() + i * o * npos;
        if (w.requires_grad()) {
          im2col(x.data() + i * in_sz, g, cols.data());
          kernels::gemm(false, true, o, ckk, npos, gi, npos, cols.data(), npos, w.grad().data(), ckk, true);
        }
        if (x.requires_grad()) {
          kernels::gemm(true, false, ckk, npos, o, w.data(), ckk, gi, npos, cols.data(), npos, false);
          col2im(cols.data(), g, x.grad().data() + i * in_sz);
        }
        if (b.defined() && b.requires_grad()) {
          auto gb = b.grad();
          for (std::size_t oc = 0; oc < o; ++oc) {
            for (std::size_t p = 0; p < npos; ++p) gb[oc] += gi[oc * npos + p];
          }
        }
      }
    });
  }
  return out;
}

Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dOptions opt) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(0),
          "deconv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>((h - 1) * opt.stride_h + kh) - 2 * static_cast<std::ptrdiff_t>(opt.pad_h);
  const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>((wd - 1) * opt.stride_w + kw) - 2 * static_cast<std::ptrdiff_t>(opt.pad_w);
  require(oh > 0 && ow > 0, "deconv2d: empty output for input " + shape_str(x.shape()));
  if (b.defined()) require(b.numel() == o, "deconv2d: bias size mismatch");
  // Geometry of the adjoint convolution acting on the output map.
  ConvGeom g{o, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kh, kw, opt.stride_h, opt.stride_w,
             opt.pad_h, opt.pad_w, h, wd};
  const std::size_t okk = o * kh * kw, npos = h * wd, out_sz = o * g.h * g.w;
  Tensor out(Shape{n, o, g.h, g.w});
  std::vector<double> cols(okk * npos);
  for (std::size_t i = 0; i < n; ++i) {
    kernels::gemm(true, false, okk, npos, c, w.data(), okk, x.data() + i * c * npos, npos, cols.data(), npos, false);
    double* dst = out.data() + i * out_sz;
    col2im(cols.data(), g, dst);
    if (b.defined()) {
      for (std::size_t oc = 0; oc < o; ++oc) {
        for (std::size_t p = 0; p < g.h * g.w; ++p) dst[oc * g.h * g.w + p] += b.data()[oc];
      }
    }
  }
  record_macs(static_cast<std::uint64_t>(n) * c * okk * npos);
  check_finite(out, "deconv2d");
  if (Tape* tape = recording_tape({&x, &w, &b})) {
    out.set_requires_grad(true);
    tape->record([x, w, b, out, g, n, c]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      const std::size_t okk = g.c * g.kh * g.kw, npos = g.oh * g.ow, out_sz = g.c * g.h * g.w;
      std::vector<double> cols(okk * npos);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = gy.data() + i * out_sz;
        if (x.requires_grad() || w.requires_grad()) im2col(gi, g, cols.data());
        if (x.requires_grad()) {
          kernels::gemm(false, false, c, npos, okk, w.data(), okk, cols.data(), npos, x.grad().data() + i * c * npos, npos, true);
        }
        if (w.requires_grad()) {
          kernels::gemm(false, true, c, okk, npos, x.data() + i * c * npos, npos, cols.data(), npos, w.grad().data(), okk, true);
        }
        if (b.defined() && b.requires_grad()) {
          auto gb = b.grad();
          const std::size_t plane = g.h * g.w;
          for (std::size_t oc = 0; oc < g.c; ++oc) {
            for (std::size_t p = 0; p < plane; ++p) gb[oc] += gi[oc * plane + p];
          }
        }
      }
    });
  }
  return out;
}

namespace {

struct LerpTap {
  std::size_t i0, i1;
  double l1;  // weight of i1
};

std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require(x.rank() == 4 && out_h > 0 && out_w > 0, "resize_bilinear expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = lerp_taps(h, out_h);
  const auto tx = lerp_taps(w, out_w);
  Tensor out(Shape{x.dim(0), x.dim(1), out_h, out_w});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const auto& bb = tx[xx];
        const double top = src[a.i0 * w + bb.i0] * (1.0 - bb.l1) + src[a.i0 * w + bb.i1] * bb.l1;
        const double bot = src[a.i1 * w + bb.i0] * (1.0 - bb.l1) + src[a.i1 * w + bb.i1] * bb.l1;
        dst[y * out_w + xx] = top * (1.0 - a.l1) + bot * a.l1;
      }
    }
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, ty, tx, planes, h, w, out_h, out_w]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t p = 0; p < planes; ++p) {
        double* dst = gx.data() + p * h * w;
        const double* g = gy.data() + p * out_h * out_w;
        for (std::size_t y = 0; y < out_h; ++y) {
          const auto& a = ty[y];
          for (std::size_t xx = 0; xx < out_w; ++xx) {
            const auto& bb = tx[xx];
            const double v = g[y * out_w + xx];
            dst[a.i0 * w + bb.i0] += v * (1.0 - a.l1) * (1.0 - bb.l1);
            dst[a.i0 * w + bb.i1] += v * (1.0 - a.l1) * bb.l1;
            dst[a.i1 * w + bb.i0] += v * a.l1 * (1.0 - bb.l1);
            dst[a.i1 * w + bb.i1] += v * a.l1 * bb.l1;
          }
        }
      }
    });
  }
  return out;
}

Tensor bilinear_upsample(const Tensor& x, std::size_t factor) {
  require(factor >= 1, "bilinear_upsample: factor must be >= 1");
  require(x.rank() == 4, "bilinear_upsample expects [N,C,H,W], got " + shape_str(x.shape()));
  return resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor);
}

namespace {

// out[n,c,h*r+i,w*r+j] = x[n, c*r*r + i*r + j, h, w]; returns flat maps out->in.
std::vector<std::size_t> shuffle_map(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t r) {
  std::vector<std::size_t> map(n * c * r * r * h * w);
  const std::size_t oh = h * r, ow = w * r;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const std::size_t i = y % r, j = xx % r;
          const std::size_t src_c = ch * r * r + i * r + j;
          map[((b * c + ch) * oh + y) * ow + xx] = ((b * c * r * r + src_c) * h + y / r) * w + xx / r;
        }
      }
    }
  }
  return map;
}

Tensor gather_flat(const Tensor& x, Shape shape, std::vector<std::size_t> map) {
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < map.size(); ++i) out.data()[i] = x.data()[map[i]];
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, map = std::move(map)]() mutable {
      const auto gy = out.grad_view();
      if (gy.empty()) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += gy[i];
    });
  }
  return out;
}

}  // namespace

Tensor pixel_unshuffle_restore(const Tensor& x, std::size_t r) {
  require(x.rank() == 4 && r >= 1, "pixel_unshuffle_restore expects [N,C,H,W], got " + shape_str(x.shape()));
  require(x.dim(1) % (r * r) == 0,
          "pixel_unshuffle_restore: " + std::to_string(x.dim(1)) + " channels not divisible by r^2 = " + std::to_string(r * r));
  const std::size_t n = x.dim(0), c = x.dim(1) / (r * r), h = x.dim(2), w = x.dim(3);
  return gather_flat(x, Shape{n, c, h * r, w * r}, shuffle_map(n, c, h, w, r));
}

Tensor space_to_channel(const Tensor& x, std::size_t r) {
  require(x.rank() == 4 && r >= 1 && x.dim(2) % r == 0 && x.dim(3) % r == 0,
          "space_to_channel: spatial dims of " + shape_str(x.shape()) + " not divisible by " + std::to_string(r));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / r, w = x.dim(3) / r;
  const auto fwd = shuffle_map(n, c, h, w, r);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return gather_flat(x, Shape{n, c * r * r, h, w}, std::move(inv));
}

// ---- losses ---------------------------------------------------------------

Tensor mse(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, n]() mutable {
      if (out.grad_view().empty()) return;
      const double g = out.grad_view()[0] * 2.0 / static_cast<double>(n);
      std::span<double> ga, gb;
      if (a.requires_grad()) ga = a.grad();
      if (b.requires_grad()) gb = b.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double d = g * (a.data()[i] - b.data()[i]);
        if (!ga.empty()) ga[i] += d;
        if (!gb.empty()) gb[i] -= d;
      }
    });
  }
  return out;
}

Tensor weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& weight) {
  require(pred.shape() == target.shape(),
          "weighted_mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const std::size_t groups = weight.numel();
  require(groups > 0 && pred.numel() % groups == 0,
          "weighted_mse: weight " + shape_str(weight.shape()) + " does not tile " + shape_str(pred.shape()));
  const std::size_t per = pred.numel() / groups;
  double wsum = 0.0, acc = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    const double wg = weight.data()[g];
    if (wg == 0.0) continue;
    wsum += wg;
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double d = pred.data()[g * per + i] - target.data()[g * per + i];
      s += d * d;
    }
    acc += wg * s / static_cast<double>(per);
  }
  Tensor out = Tensor::scalar(wsum > 0.0 ? acc / wsum : 0.0);
  if (Tape* tape = recording_tape({&pred, &target})) {
    out.set_requires_grad(true);
    tape->record([pred, target, weight, out, groups, per, wsum]() mutable {
      if (out.grad_view().empty() || wsum <= 0.0) return;
      const double g0 = out.grad_view()[0] * 2.0 / (static_cast<double>(per) * wsum);
      std::span<double> gp, gt;
      if (pred.requires_grad()) gp = pred.grad();
      if (target.requires_grad()) gt = target.grad();
      for (std::size_t g = 0; g < groups; ++g) {
        const double wg = weight.data()[g];
        if (wg == 0.0) continue;
        for (std::size_t i = 0; i < per; ++i) {
          const std::size_t k = g * per + i;
          const double d = g0 * wg * (pred.data()[k] - target.data()[k]);
          if (!gp.empty()) gp[k] += d;
          if (!gt.empty()) gt[k] -= d;
        }
      }
    });
  }
  return out;
}

}  // namespace vitpose::ops
