#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "vitpose/tensor.hpp"

// Differentiable tensor operations. Every op records an analytic backward rule
// on the active tape when one of its inputs requires a gradient.

namespace vitpose::ops {

// ---- elementwise, numpy-style broadcasting -------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);

// ---- reductions -----------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces one axis (kept with extent 1 when keepdim).
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = false);

// ---- linear algebra -------------------------------------------------------
/// a[m,k] x b[k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched a[B,m,k] x b[B,k,n] (or b^T when trans_b: b[B,n,k]).
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false);
/// x[..., in] * w[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// ---- normalisation / attention pieces ------------------------------------
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor softmax(const Tensor& x, std::size_t axis);
/// BatchNorm over [N,C,H,W]. Training mode uses batch statistics and updates the
/// running buffers in place (momentum 0.1 convention, unbiased running variance).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean, Tensor& running_var,
                  bool training, double momentum = 0.1, double eps = 1e-5);

// ---- shape ----------------------------------------------------------------
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Cyclic shift along axis: out[i] = x[(i - shift) mod n].
Tensor roll(const Tensor& x, std::size_t axis, std::ptrdiff_t shift);
Tensor pad_axis(const Tensor& x, std::size_t axis, std::size_t before, std::size_t after);
/// Rows of x[R, ...] picked by index.
Tensor index_select(const Tensor& x, const std::vector<std::size_t>& index);

// ---- spatial --------------------------------------------------------------
struct Conv2dOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};
/// Cross-correlation: x[N,C,H,W], w[O,C,kh,kw], b[O] (optional).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dOptions opt);
/// Transposed convolution: x[N,C,H,W], w[C,O,kh,kw]; out = (H-1)s - 2p + k.
Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dOptions opt);
/// Bilinear resize with align_corners = false (half-pixel centres, edge clamp).
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor bilinear_upsample(const Tensor& x, std::size_t factor);
/// Channel-to-space: [N, r*r*C, H, W] -> [N, C, rH, rW].
Tensor pixel_unshuffle_restore(const Tensor& x, std::size_t r);
/// Space-to-channel, exact inverse of pixel_unshuffle_restore.
Tensor space_to_channel(const Tensor& x, std::size_t r);

// ---- losses ---------------------------------------------------------------
/// Mean over all elements of (a - b)^2.
Tensor mse(const Tensor& a, const Tensor& b);
/// pred/target [G..., S...] with weight over the leading groups (weight.numel() == G):
/// sum_g w_g * mean_s (pred - target)^2 / sum_g w_g, zero when all weights vanish.
Tensor weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& weight);

}  // namespace vitpose::ops
