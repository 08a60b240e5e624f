#include "vitpose/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "vitpose/flops.hpp"
#include "vitpose/ops.hpp"

namespace vitpose {

namespace {

constexpr double kMasked = -1e30;

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
  Tensor t = ops::reshape(x, {b, l, heads, c / heads});
  t = ops::permute(t, {0, 2, 1, 3});
  return ops::reshape(t, {b * heads, l, c / heads});
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  const std::size_t bh = x.dim(0), l = x.dim(1), dh = x.dim(2);
  Tensor t = ops::reshape(x, {bh / heads, heads, l, dh});
  t = ops::permute(t, {0, 2, 1, 3});
  return ops::reshape(t, {bh / heads, l, heads * dh});
}

// q[B,L,C], k/v[B,Lk,C]. bias, when defined, is [G,h|1,L,Lk] with B a multiple of G
// (windows of one image are contiguous along B).
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, const Tensor& bias) {
  const std::size_t b = q.dim(0), l = q.dim(1), c = q.dim(2), lk = k.dim(1);
  const std::size_t dh = c / heads;
  Tensor qh = ops::scale(split_heads(q, heads), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor kh = split_heads(k, heads);
  Tensor vh = split_heads(v, heads);
  Tensor scores;
  {
    FlopScope s("scores");
    scores = ops::bmm(qh, kh, true);
  }
  if (bias.defined()) {
    const std::size_t g = bias.dim(0);
    scores = ops::reshape(scores, {b / g, g, heads, l, lk});
    scores = ops::add(scores, bias);
    scores = ops::reshape(scores, {b * heads, l, lk});
  }
  Tensor attn = ops::softmax(scores, 2);
  Tensor ctx;
  {
    FlopScope s("context");
    ctx = ops::bmm(attn, vh);
  }
  return merge_heads(ctx, heads);
}

Tensor linear_scoped(const char* name, const Tensor& x, const Tensor& w, const Tensor& b) {
  FlopScope s(name);
  return ops::linear(x, w, b);
}

}  // namespace

Tensor mhsa(const Tensor& x, const AttentionWeights& w, std::size_t heads, const Tensor& extra_kv) {
  if (x.rank() != 3) throw DimensionError("mhsa expects tokens [N,T,C], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(2);
  if (heads == 0 || c % heads != 0) {
    throw DimensionError("mhsa: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads) + " heads");
  }
  FlopScope scope("attn");
  Tensor qkv = linear_scoped("qkv", x, w.qkv_w, w.qkv_b);
  Tensor q = ops::slice(qkv, 2, 0, c);
  Tensor k = ops::slice(qkv, 2, c, c);
  Tensor v = ops::slice(qkv, 2, 2 * c, c);
  if (extra_kv.defined()) {
    Tensor kv = linear_scoped("kv_extra", extra_kv, ops::slice(w.qkv_w, 1, c, 2 * c), ops::slice(w.qkv_b, 0, c, 2 * c));
    k = ops::concat({k, ops::slice(kv, 2, 0, c)}, 1);
    v = ops::concat({v, ops::slice(kv, 2, c, c)}, 1);
  }
  Tensor ctx = attention_core(q, k, v, heads, Tensor());
  return linear_scoped("proj", ctx, w.proj_w, w.proj_b);
}

Tensor grid_roll(const Tensor& grid, std::ptrdiff_t shift_h, std::ptrdiff_t shift_w) {
  Tensor t = shift_h ? ops::roll(grid, 1, shift_h) : grid;
  return shift_w ? ops::roll(t, 2, shift_w) : t;
}

Tensor window_attention(const Tensor& grid, const AttentionWeights& w, std::size_t heads, const WindowSpec& spec) {
  if (grid.rank() != 4) throw DimensionError("window_attention expects [N,h,w,C], got " + shape_str(grid.shape()));
  const std::size_t n = grid.dim(0), gh = grid.dim(1), gw = grid.dim(2), c = grid.dim(3);
  if (heads == 0 || c % heads != 0) throw DimensionError("window_attention: channels not divisible by heads");
  if (spec.wh == 0 || spec.ww == 0) throw std::invalid_argument("window size must be positive");
  const std::size_t hp = (gh + spec.wh - 1) / spec.wh * spec.wh;
  const std::size_t wp = (gw + spec.ww - 1) / spec.ww * spec.ww;
  if (spec.wh > hp || spec.ww > wp) throw std::invalid_argument("window larger than padded grid");
  const std::size_t nh = hp / spec.wh, nw = wp / spec.ww, nwin = nh * nw, l = spec.wh * spec.ww;
  const std::size_t sh = spec.shift ? spec.wh / 2 : 0, sw = spec.shift ? spec.ww / 2 : 0;

  FlopScope scope("attn");
  Tensor x = ops::pad_axis(ops::pad_axis(grid, 1, 0, hp - gh), 2, 0, wp - gw);
  if (sh || sw) x = grid_roll(x, -static_cast<std::ptrdiff_t>(sh), -static_cast<std::ptrdiff_t>(sw));

  // Validity of each (window, slot) after the shift.
  std::vector<char> valid(nwin * l);
  bool any_pad = false;
  for (std::size_t wi = 0; wi < nh; ++wi) {
    for (std::size_t wj = 0; wj < nw; ++wj) {
      for (std::size_t a = 0; a < spec.wh; ++a) {
        for (std::size_t b = 0; b < spec.ww; ++b) {
          const std::size_t i = ((wi * spec.wh + a) + sh) % hp;
          const std::size_t j = ((wj * spec.ww + b) + sw) % wp;
          const bool ok = i < gh && j < gw;
          valid[(wi * nw + wj) * l + a * spec.ww + b] = ok;
          any_pad = any_pad || !ok;
        }
      }
    }
  }

  x = ops::reshape(x, {n, nh, spec.wh, nw, spec.ww, c});
  x = ops::permute(x, {0, 1, 3, 2, 4, 5});
  x = ops::reshape(x, {n * nwin, l, c});

  Tensor qkv = linear_scoped("qkv", x, w.qkv_w, w.qkv_b);
  Tensor q = ops::slice(qkv, 2, 0, c);
  Tensor k = ops::slice(qkv, 2, c, c);
  Tensor v = ops::slice(qkv, 2, 2 * c, c);

  std::size_t lk = l;
  if (spec.pool) {
    // Mean over the valid slots of every window, appended to each window's keys/values.
    Tensor weights({nwin, l, 1});
    for (std::size_t wi = 0; wi < nwin; ++wi) {
      std::size_t count = 0;
      for (std::size_t s = 0; s < l; ++s) count += valid[wi * l + s];
      for (std::size_t s = 0; s < l; ++s) weights.data()[wi * l + s] = valid[wi * l + s] ? 1.0 / static_cast<double>(count) : 0.0;
    }
    auto pooled = [&](const Tensor& t) {
      Tensor m = ops::sum_axis(ops::mul(ops::reshape(t, {n, nwin, l, c}), weights), 2);
      m = ops::broadcast_to(ops::reshape(m, {n, 1, nwin, c}), {n, nwin, nwin, c});
      return ops::reshape(m, {n * nwin, nwin, c});
    };
    k = ops::concat({k, pooled(k)}, 1);
    v = ops::concat({v, pooled(v)}, 1);
    lk += nwin;
  }

  Tensor bias;
  if (any_pad) {
    Tensor mask({nwin, 1, l, lk});
    for (std::size_t wi = 0; wi < nwin; ++wi) {
      for (std::size_t qi = 0; qi < l; ++qi) {
        for (std::size_t kj = 0; kj < l; ++kj) {
          if (!valid[wi * l + kj]) mask.data()[(wi * l + qi) * lk + kj] = kMasked;
        }
      }
    }
    bias = mask;
  }
  if (w.rel_table.defined()) {
    std::vector<std::size_t> index(l * l);
    for (std::size_t p = 0; p < l; ++p) {
      for (std::size_t r = 0; r < l; ++r) {
        const std::size_t di = p / spec.ww + spec.wh - 1 - r / spec.ww;
        const std::size_t dj = p % spec.ww + spec.ww - 1 - r % spec.ww;
        index[p * l + r] = di * (2 * spec.ww - 1) + dj;
      }
    }
    Tensor rel = ops::index_select(w.rel_table, index);  // [L*L, h]
    rel = ops::reshape(ops::permute(rel, {1, 0}), {heads, l, l});
    rel = ops::reshape(ops::pad_axis(rel, 2, 0, lk - l), {1, heads, l, lk});
    bias = bias.defined() ? ops::add(bias, rel) : rel;
  }

  Tensor ctx = attention_core(q, k, v, heads, bias);
  Tensor out = linear_scoped("proj", ctx, w.proj_w, w.proj_b);

  out = ops::reshape(out, {n, nh, nw, spec.wh, spec.ww, c});
  out = ops::permute(out, {0, 1, 3, 2, 4, 5});
  out = ops::reshape(out, {n, hp, wp, c});
  if (sh || sw) out = grid_roll(out, static_cast<std::ptrdiff_t>(sh), static_cast<std::ptrdiff_t>(sw));
  if (hp != gh) out = ops::slice(out, 1, 0, gh);
  if (wp != gw) out = ops::slice(out, 2, 0, gw);
  return out;
}

Tensor drop_path(const Tensor& x, double rate, bool training, Rng* rng) {
  if (!training || rate <= 0.0) return x;
  if (!rng) throw std::invalid_argument("drop_path in training mode needs an rng");
  Shape shape(x.rank(), 1);
  shape[0] = x.dim(0);
  Tensor keep(shape);
  for (std::size_t i = 0; i < x.dim(0); ++i) keep.data()[i] = rng->bernoulli(1.0 - rate) ? 1.0 / (1.0 - rate) : 0.0;
  return ops::mul(x, keep);
}

Tensor resize_pos_embed(const Tensor& pos, std::size_t gh0, std::size_t gw0, std::size_t gh, std::size_t gw) {
  if (gh0 == gh && gw0 == gw) return pos;
  const std::size_t c = pos.dim(1);
  Tensor t = ops::permute(ops::reshape(pos, {1, gh0, gw0, c}), {0, 3, 1, 2});
  t = ops::resize_bilinear(t, gh, gw);
  return ops::reshape(ops::permute(t, {0, 2, 3, 1}), {gh * gw, c});
}

Tensor patch_embed(const Tensor& images, const Tensor& weight, const Tensor& bias, const Tensor& pos_embed,
                   const BackboneConfig& cfg, const Tensor& mask_token, const Tensor& mask) {
  if (images.rank() != 4) throw DimensionError("patch_embed expects [N,3,H,W], got " + shape_str(images.shape()));
  const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3), c = cfg.dim;
  if (h % cfg.stride != 0 || w % cfg.stride != 0) {
    throw DimensionError("input " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by stride " +
                         std::to_string(cfg.stride));
  }
  const std::size_t pad = cfg.patch_pad();
  Tensor x;
  {
    FlopScope s("patch_embed");
    x = ops::conv2d(images, weight, bias, {cfg.stride, cfg.stride, pad, pad});
  }
  const std::size_t gh = x.dim(2), gw = x.dim(3), t = gh * gw;
  x = ops::permute(ops::reshape(x, {n, c, t}), {0, 2, 1});
  if (mask_token.defined()) {
    if (!mask.defined() || mask.numel() != n * t) throw DimensionError("mask must hold one entry per token");
    Tensor m = ops::reshape(mask, {n, t, 1});
    Tensor keep = ops::add_scalar(ops::scale(m, -1.0), 1.0);
    x = ops::add(ops::mul(x, keep), ops::mul(m, ops::reshape(mask_token, {1, 1, c})));
  }
  Tensor pos = resize_pos_embed(pos_embed, cfg.grid_h(), cfg.grid_w(), gh, gw);
  return ops::add(x, ops::reshape(pos, {1, t, c}));
}

Tensor transformer_block(const Tensor& x, const BlockWeights& w, const BlockContext& ctx) {
  const std::size_t n = x.dim(0), t = x.dim(1), c = x.dim(2);
  Tensor h = ops::layer_norm(x, w.norm1_g, w.norm1_b);
  Tensor a;
  if (ctx.window) {
    if (t != ctx.grid_h * ctx.grid_w) {
      throw DimensionError("window attention needs exactly grid_h*grid_w tokens, got " + std::to_string(t));
    }
    a = window_attention(ops::reshape(h, {n, ctx.grid_h, ctx.grid_w, c}), w.attn, ctx.heads, ctx.window_spec);
    a = ops::reshape(a, {n, t, c});
  } else {
    a = mhsa(h, w.attn, ctx.heads);
  }
  Tensor y = ops::add(x, drop_path(a, ctx.drop_path_rate, ctx.training, ctx.rng));
  Tensor h2 = ops::layer_norm(y, w.norm2_g, w.norm2_b);
  Tensor f;
  {
    FlopScope s("ffn");
    f = moe_ffn_forward(h2, w.ffn, ctx.task, ctx.activation);
  }
  return ops::add(y, drop_path(f, ctx.drop_path_rate, ctx.training, ctx.rng));
}

}  // namespace vitpose
