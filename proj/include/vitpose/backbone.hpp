#pragma once

#include <cstddef>

#include "vitpose/config.hpp"
#include "vitpose/moe.hpp"
#include "vitpose/rng.hpp"
#include "vitpose/tensor.hpp"

namespace vitpose {

struct AttentionWeights {
  Tensor qkv_w;  // [C, 3C]
  Tensor qkv_b;  // [3C]
  Tensor proj_w;  // [C, C]
  Tensor proj_b;  // [C]
  Tensor rel_table;  // [(2wh-1)(2ww-1), heads], undefined when disabled
};

struct WindowSpec {
  std::size_t wh = 8, ww = 8;
  bool shift = false;
  bool pool = false;
};

/// Multi-head self-attention over x[N,T,C]. Tokens in extra_kv[N,E,C] are
/// projected and appended to the keys and values only.
Tensor mhsa(const Tensor& x, const AttentionWeights& w, std::size_t heads, const Tensor& extra_kv = Tensor());

/// Windowed attention on a token grid [N,h,w,C]. The grid is zero padded to a
/// multiple of the window; padded keys are masked out.
Tensor window_attention(const Tensor& grid, const AttentionWeights& w, std::size_t heads, const WindowSpec& spec);

/// Cyclic shift of a token grid [N,h,w,C] along both spatial axes.
Tensor grid_roll(const Tensor& grid, std::ptrdiff_t shift_h, std::ptrdiff_t shift_w);

/// Stochastic depth: zeroes whole samples with probability rate, scales survivors by 1/(1-rate).
Tensor drop_path(const Tensor& x, double rate, bool training, Rng* rng);

/// Convolutional patch projection plus position embedding; returns tokens [N, gh*gw, C].
/// pos_embed is [gh0*gw0, C] and is bilinearly resized when the grid differs.
Tensor patch_embed(const Tensor& images, const Tensor& weight, const Tensor& bias, const Tensor& pos_embed,
                   const BackboneConfig& cfg, const Tensor& mask_token = Tensor(), const Tensor& mask = Tensor());

Tensor resize_pos_embed(const Tensor& pos, std::size_t gh0, std::size_t gw0, std::size_t gh, std::size_t gw);

struct BlockWeights {
  Tensor norm1_g, norm1_b;
  AttentionWeights attn;
  Tensor norm2_g, norm2_b;
  MoeFfnWeights ffn;
};

struct BlockContext {
  std::size_t heads = 1;
  bool window = false;
  WindowSpec window_spec;
  std::size_t grid_h = 0, grid_w = 0;
  Activation activation = Activation::gelu;
  double drop_path_rate = 0.0;
  bool training = false;
  Rng* rng = nullptr;
  std::size_t task = 0;
};

/// Pre-norm block: x + MHSA(LN(x)), then + FFN(LN(.)).
Tensor transformer_block(const Tensor& x, const BlockWeights& w, const BlockContext& ctx);

}  // namespace vitpose
