#include "vitpose/decoders.hpp"

#include "vitpose/flops.hpp"
#include "vitpose/ops.hpp"

namespace vitpose {

namespace {

void require_features(const Tensor& f, std::size_t channels) {
  if (f.rank() != 4 || f.dim(1) != channels) {
    throw DimensionError("decoder expects [N," + std::to_string(channels) + ",h,w] features, got " + shape_str(f.shape()));
  }
}

Tensor final_conv(const Tensor& x, const DecoderWeights& w, std::size_t pad) {
  FlopScope s("final");
  return ops::conv2d(x, w.conv_w, w.conv_b, {1, 1, pad, pad});
}

}  // namespace

Tensor deconv_block(const Tensor& x, const Tensor& w, const Tensor& g, const Tensor& b, Tensor& mean, Tensor& var,
                    bool training, const char* scope) {
  Tensor y;
  {
    FlopScope s(scope);
    y = ops::deconv2d(x, w, Tensor(), {2, 2, 1, 1});
  }
  if (y.dim(2) != 2 * x.dim(2) || y.dim(3) != 2 * x.dim(3)) throw DimensionError("deconv block must double the grid");
  return ops::relu(ops::batch_norm(y, g, b, mean, var, training));
}

Tensor classic_decode(const Tensor& features, const DecoderWeights& w, bool training) {
  require_features(features, w.deconv1_w.dim(0));
  Tensor x = deconv_block(features, w.deconv1_w, w.bn1_g, w.bn1_b, w.bn1_mean, w.bn1_var, training, "deconv1");
  x = deconv_block(x, w.deconv2_w, w.bn2_g, w.bn2_b, w.bn2_mean, w.bn2_var, training, "deconv2");
  return final_conv(x, w, 0);
}

Tensor simple_decode(const Tensor& features, const DecoderWeights& w) {
  require_features(features, w.conv_w.dim(1));
  Tensor x = ops::bilinear_upsample(ops::relu(features), 4);
  return final_conv(x, w, 1);
}

Tensor minimal_decode(const Tensor& features, const DecoderWeights& w) {
  require_features(features, w.conv_w.dim(1));
  return ops::pixel_unshuffle_restore(final_conv(features, w, 0), 4);
}

DecoderOutput bottom_up_decode(const Tensor& features, const DecoderWeights& w, std::size_t num_keypoints,
                               bool training) {
  require_features(features, w.deconv1_w.dim(0));
  Tensor x = deconv_block(features, w.deconv1_w, w.bn1_g, w.bn1_b, w.bn1_mean, w.bn1_var, training, "deconv1");
  Tensor y = final_conv(x, w, 0);
  const std::size_t total = y.dim(1);
  return {ops::slice(y, 1, 0, num_keypoints), ops::slice(y, 1, num_keypoints, total - num_keypoints)};
}

DecoderOutput decode(const Tensor& features, const DecoderWeights& w, std::size_t num_keypoints, bool training) {
  switch (w.kind) {
    case DecoderKind::classic:
    case DecoderKind::classic_fp:
      return {classic_decode(features, w, training), Tensor()};
    case DecoderKind::simple:
      return {simple_decode(features, w), Tensor()};
    case DecoderKind::minimal:
      return {minimal_decode(features, w), Tensor()};
    case DecoderKind::bottom_up_ae:
      return bottom_up_decode(features, w, num_keypoints, training);
  }
  throw std::logic_error("unhandled decoder kind");
}

}  // namespace vitpose
