#include <cmath>
#include <numbers>

#include "vitpose/data.hpp"

namespace vitpose {

// Pixel i has its centre at coordinate i, in both the source image and the crop.
std::array<double, 6> CropTransform::forward_matrix() const {
  const double r = rotation * std::numbers::pi / 180.0;
  const double sx = static_cast<double>(out_w) / scale[0], sy = static_cast<double>(out_h) / scale[1];
  const double c = std::cos(r), s = std::sin(r);
  // dst = D * R * (src - center) + out_center, with R rotating counter-clockwise on screen.
  double a = c * sx, b = s * sx, d = -s * sy, e = c * sy;
  double tx = (out_w - 1) * 0.5 - (a * center[0] + b * center[1]);
  double ty = (out_h - 1) * 0.5 - (d * center[0] + e * center[1]);
  if (flip) {
    a = -a, b = -b;
    tx = (out_w - 1) - tx;
  }
  return {a, b, tx, d, e, ty};
}

std::array<double, 6> CropTransform::inverse_matrix() const {
  const auto m = forward_matrix();
  const double det = m[0] * m[4] - m[1] * m[3];
  const double ia = m[4] / det, ib = -m[1] / det, id = -m[3] / det, ie = m[0] / det;
  return {ia, ib, -(ia * m[2] + ib * m[5]), id, ie, -(id * m[2] + ie * m[5])};
}

std::array<double, 2> CropTransform::apply(double x, double y) const {
  const auto m = forward_matrix();
  return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
}

std::array<double, 2> CropTransform::invert(double x, double y) const {
  const auto m = inverse_matrix();
  return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
}

CropTransform crop_for_box(const Box& box, std::size_t out_h, std::size_t out_w, double padding) {
  if (!(box.w > 0) || !(box.h > 0)) {
    throw std::invalid_argument("degenerate box " + std::to_string(box.w) + "x" + std::to_string(box.h));
  }
  CropTransform t;
  t.out_h = out_h;
  t.out_w = out_w;
  t.center = {box.x + box.w * 0.5, box.y + box.h * 0.5};
  const double aspect = static_cast<double>(out_w) / static_cast<double>(out_h);
  double w = box.w, h = box.h;
  if (w > aspect * h) {
    h = w / aspect;
  } else {
    w = h * aspect;
  }
  t.scale = {w * padding, h * padding};
  return t;
}

Pose transform_pose(const Pose& pose, const CropTransform& t, const DatasetSpec& spec) {
  Pose out = pose;
  for (auto& k : out) {
    const auto p = t.apply(k.x, k.y);
    k.x = p[0];
    k.y = p[1];
  }
  if (t.flip) {
    for (const auto& pr : spec.flip_pairs) std::swap(out[pr[0]], out[pr[1]]);
  }
  return out;
}

CropSample crop_affine(const Image& image, const PoseInstance& inst, const DatasetSpec& spec, std::size_t out_h,
                       std::size_t out_w, const Augment& augment, Rng* rng) {
  CropTransform t = crop_for_box(inst.bbox, out_h, out_w);
  if (rng) {
    if (augment.scale_jitter > 0) {
      const double f = rng->uniform(1.0 - augment.scale_jitter, 1.0 + augment.scale_jitter);
      t.scale = {t.scale[0] * f, t.scale[1] * f};
    }
    if (augment.max_rotation > 0) t.rotation = rng->uniform(-augment.max_rotation, augment.max_rotation);
    if (augment.flip) t.flip = rng->bernoulli(0.5);
  }
  CropSample s;
  s.transform = t;
  s.task = inst.task;
  s.keypoints = transform_pose(inst.keypoints, t, spec);
  s.image = Tensor({3, out_h, out_w});
  double* d = s.image.data();
  const auto m = t.inverse_matrix();
  const std::size_t plane = out_h * out_w;
  const auto w = static_cast<std::ptrdiff_t>(image.width), h = static_cast<std::ptrdiff_t>(image.height);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = m[0] * x + m[1] * y + m[2], sy = m[3] * x + m[4] * y + m[5];
      const double fx = std::floor(sx), fy = std::floor(sy);
      const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
      const double ax = sx - fx, ay = sy - fy;
      double acc[3] = {0, 0, 0};
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const std::ptrdiff_t xx = x0 + dx, yy = y0 + dy;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
          const double wt = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
          const std::uint8_t* p = image.px(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy));
          for (int c = 0; c < 3; ++c) acc[c] += wt * p[c];
        }
      }
      for (int c = 0; c < 3; ++c) d[c * plane + y * out_w + x] = acc[c] / 255.0;
    }
  }
  return s;
}

}  // namespace vitpose
