#pragma once

#include <cstddef>

#include "vitpose/config.hpp"
#include "vitpose/tensor.hpp"

namespace vitpose {

/// Weights of one keypoint head. Unused slots stay undefined for a given kind.
struct DecoderWeights {
  DecoderKind kind = DecoderKind::classic;
  Tensor deconv1_w;  // [C, D, 4, 4]
  Tensor bn1_g, bn1_b;
  mutable Tensor bn1_mean, bn1_var;
  Tensor deconv2_w;  // [D, D, 4, 4]
  Tensor bn2_g, bn2_b;
  mutable Tensor bn2_mean, bn2_var;
  Tensor conv_w, conv_b;  // final predictor
};

struct DecoderOutput {
  Tensor heatmaps;  // [N, Nk, H', W']
  Tensor tags;  // [N, Nk*tag_dim, H', W'], bottom-up only
};

/// Deconv(k4, s2, p1) -> BatchNorm -> ReLU.
Tensor deconv_block(const Tensor& x, const Tensor& w, const Tensor& g, const Tensor& b, Tensor& mean, Tensor& var,
                    bool training, const char* scope);

Tensor classic_decode(const Tensor& features, const DecoderWeights& w, bool training);
Tensor simple_decode(const Tensor& features, const DecoderWeights& w);
Tensor minimal_decode(const Tensor& features, const DecoderWeights& w);
DecoderOutput bottom_up_decode(const Tensor& features, const DecoderWeights& w, std::size_t num_keypoints,
                               bool training);

/// Dispatches on w.kind. features are [N, C, h, w].
DecoderOutput decode(const Tensor& features, const DecoderWeights& w, std::size_t num_keypoints, bool training);

}  // namespace vitpose
