#include "vitpose/codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "vitpose/ops.hpp"

namespace vitpose {

namespace {

long round_cell(double v) { return std::lround(v); }

bool inside(long x, long y, std::size_t h, std::size_t w) {
  return x >= 0 && y >= 0 && x < static_cast<long>(w) && y < static_cast<long>(h);
}

double map_at(const double* m, std::size_t w, std::size_t y, std::size_t x) { return m[y * w + x]; }

Keypoint decode_map(const double* m, std::size_t h, std::size_t w) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < h * w; ++i) {
    if (m[i] > m[best]) best = i;
  }
  const std::size_t y = best / w, x = best % w;
  Keypoint k;
  k.x = static_cast<double>(x);
  k.y = static_cast<double>(y);
  if (x > 0 && x + 1 < w) {
    const double d = map_at(m, w, y, x + 1) - map_at(m, w, y, x - 1);
    k.x += d > 0 ? 0.25 : d < 0 ? -0.25 : 0.0;
  }
  if (y > 0 && y + 1 < h) {
    const double d = map_at(m, w, y + 1, x) - map_at(m, w, y - 1, x);
    k.y += d > 0 ? 0.25 : d < 0 ? -0.25 : 0.0;
  }
  k.score = std::clamp(m[best], 0.0, 1.0);
  k.v = 2;
  return k;
}

}  // namespace

HeatmapTargets encode_targets(const Pose& keypoints, std::size_t h, std::size_t w, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("heatmap sigma must be positive");
  const std::size_t nk = keypoints.size();
  HeatmapTargets t{Tensor({nk, h, w}), Tensor({nk})};
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t k = 0; k < nk; ++k) {
    const Keypoint& kp = keypoints[k];
    if (kp.v == 0 || !std::isfinite(kp.x) || !std::isfinite(kp.y)) continue;
    const long cx = round_cell(kp.x), cy = round_cell(kp.y);
    if (!inside(cx, cy, h, w)) continue;
    t.weights.data()[k] = 1.0;
    double* m = t.heatmaps.data() + k * h * w;
    // Centred on the true position, scaled so the nearest cell reads exactly 1.
    const double ox = static_cast<double>(cx) - kp.x, oy = static_cast<double>(cy) - kp.y;
    const double peak = (ox * ox + oy * oy) * inv;
    for (std::size_t y = 0; y < h; ++y) {
      const double dy = static_cast<double>(y) - kp.y;
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - kp.x;
        m[y * w + x] = std::exp(peak - (dx * dx + dy * dy) * inv);
      }
    }
  }
  return t;
}

HeatmapTargets encode_batch(const std::vector<Pose>& poses, std::size_t h, std::size_t w, double sigma) {
  if (poses.empty()) throw std::invalid_argument("encode_batch needs at least one pose");
  const std::size_t n = poses.size(), nk = poses[0].size();
  HeatmapTargets out{Tensor({n, nk, h, w}), Tensor({n, nk})};
  for (std::size_t i = 0; i < n; ++i) {
    if (poses[i].size() != nk) throw DimensionError("encode_batch: poses have different keypoint counts");
    HeatmapTargets t = encode_targets(poses[i], h, w, sigma);
    std::copy(t.heatmaps.values().begin(), t.heatmaps.values().end(), out.heatmaps.data() + i * nk * h * w);
    std::copy(t.weights.values().begin(), t.weights.values().end(), out.weights.data() + i * nk);
  }
  return out;
}

Pose decode_keypoints(const Tensor& heatmaps) {
  if (heatmaps.rank() != 3) throw DimensionError("decode_keypoints expects [Nk,h,w], got " + shape_str(heatmaps.shape()));
  const std::size_t nk = heatmaps.dim(0), h = heatmaps.dim(1), w = heatmaps.dim(2);
  Pose out(nk);
  for (std::size_t k = 0; k < nk; ++k) out[k] = decode_map(heatmaps.data() + k * h * w, h, w);
  return out;
}

std::vector<Pose> decode_batch(const Tensor& heatmaps) {
  if (heatmaps.rank() != 4) throw DimensionError("decode_batch expects [N,Nk,h,w], got " + shape_str(heatmaps.shape()));
  const std::size_t n = heatmaps.dim(0), nk = heatmaps.dim(1), h = heatmaps.dim(2), w = heatmaps.dim(3);
  std::vector<Pose> out(n, Pose(nk));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < nk; ++k) out[i][k] = decode_map(heatmaps.data() + (i * nk + k) * h * w, h, w);
  }
  return out;
}

Tensor heatmap_mse_loss(const Tensor& pred, const Tensor& target, const Tensor& weight) {
  if (pred.rank() != 4) throw DimensionError("heatmap loss expects [N,Nk,h,w], got " + shape_str(pred.shape()));
  if (weight.numel() != pred.dim(0) * pred.dim(1)) {
    throw DimensionError("heatmap loss weight " + shape_str(weight.shape()) + " does not match " + shape_str(pred.shape()));
  }
  return ops::weighted_mse(pred, target, weight);
}

AeLoss ae_loss(const Tensor& tags, const std::vector<std::vector<Pose>>& persons, std::size_t tag_dim,
               std::size_t pull_radius) {
  if (tags.rank() != 4) throw DimensionError("ae_loss expects tags [N,Nk*D,h,w], got " + shape_str(tags.shape()));
  if (persons.size() != tags.dim(0)) throw DimensionError("ae_loss: one person list per image required");
  if (tag_dim == 0 || tags.dim(1) % tag_dim != 0) throw DimensionError("ae_loss: tag channels not divisible by tag_dim");
  const std::size_t n = tags.dim(0), ch = tags.dim(1), h = tags.dim(2), w = tags.dim(3), nk = ch / tag_dim;
  const std::size_t d = tag_dim;
  Tensor pull_sum = Tensor::scalar(0.0), push_sum = Tensor::scalar(0.0);
  std::size_t images = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor flat = ops::reshape(ops::slice(tags, 0, i, 1), {ch * h * w, 1});
    std::vector<Tensor> means;
    Tensor pull = Tensor::scalar(0.0);
    for (const Pose& pose : persons[i]) {
      if (pose.size() != nk) throw DimensionError("ae_loss: pose keypoint count does not match tag channels");
      std::vector<std::size_t> idx;
      for (std::size_t k = 0; k < nk; ++k) {
        const Keypoint& kp = pose[k];
        if (kp.v == 0) continue;
        const long x = round_cell(kp.x), y = round_cell(kp.y);
        if (!inside(x, y, h, w)) continue;
        const long r = static_cast<long>(pull_radius);
        for (long yy = y - r; yy <= y + r; ++yy) {
          for (long xx = x - r; xx <= x + r; ++xx) {
            if (!inside(xx, yy, h, w)) continue;
            for (std::size_t j = 0; j < d; ++j) {
              idx.push_back(((k * d + j) * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx));
            }
          }
        }
      }
      if (idx.empty()) continue;
      const std::size_t kp_count = idx.size() / d;
      Tensor sel = ops::reshape(ops::index_select(flat, idx), {kp_count, d});
      Tensor mean = ops::mean_axis(sel, 0, true);
      Tensor var = ops::scale(ops::sum(ops::square(ops::sub(sel, mean))), 1.0 / static_cast<double>(kp_count));
      pull = ops::add(pull, var);
      means.push_back(mean);
    }
    if (means.empty()) continue;
    ++images;
    pull_sum = ops::add(pull_sum, ops::scale(pull, 1.0 / static_cast<double>(means.size())));
    for (std::size_t a = 0; a < means.size(); ++a) {
      for (std::size_t b = a + 1; b < means.size(); ++b) {
        Tensor dist = ops::sum(ops::square(ops::sub(means[a], means[b])));
        push_sum = ops::add(push_sum, ops::exp(ops::scale(dist, -0.5)));
      }
    }
  }
  AeLoss out;
  const double norm = images ? 1.0 / static_cast<double>(images) : 0.0;
  out.pull = ops::scale(pull_sum, norm);
  out.push = ops::scale(push_sum, norm);
  out.total = ops::add(out.pull, out.push);
  return out;
}

std::vector<GroupedPerson> ae_group(const Tensor& heatmaps, const Tensor& tags, const GroupOptions& opt) {
  if (heatmaps.rank() != 3 || tags.rank() != 3) throw DimensionError("ae_group expects [Nk,h,w] heatmaps and tags");
  const std::size_t nk = heatmaps.dim(0), h = heatmaps.dim(1), w = heatmaps.dim(2), d = opt.tag_dim;
  if (tags.dim(0) != nk * d || tags.dim(1) != h || tags.dim(2) != w) {
    throw DimensionError("ae_group: tags " + shape_str(tags.shape()) + " do not match heatmaps " +
                         shape_str(heatmaps.shape()));
  }
  struct Group {
    GroupedPerson person;
    std::vector<double> tag_sum;
    std::size_t count = 0;
  };
  std::vector<Group> groups;
  for (std::size_t k = 0; k < nk; ++k) {
    const double* m = heatmaps.data() + k * h * w;
    struct Peak {
      std::size_t y, x;
      double value;
    };
    std::vector<Peak> peaks;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double v = m[y * w + x];
        if (!(v > opt.threshold)) continue;
        bool is_max = true;
        const long r = static_cast<long>(opt.nms_radius);
        for (long dy = -r; dy <= r && is_max; ++dy) {
          for (long dx = -r; dx <= r; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if ((dy || dx) && inside(xx, yy, h, w) && m[yy * w + xx] > v) {
              is_max = false;
              break;
            }
          }
        }
        if (is_max) peaks.push_back({y, x, v});
      }
    }
    std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.value > b.value; });
    for (const Peak& p : peaks) {
      std::vector<double> tag(d);
      for (std::size_t j = 0; j < d; ++j) tag[j] = tags.at(((k * d + j) * h + p.y) * w + p.x);
      auto tag_dist = [&](const Group& g) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = tag[j] - g.tag_sum[j] / static_cast<double>(g.count);
          s += diff * diff;
        }
        return std::sqrt(s);
      };
      Group* best = nullptr;
      double best_dist = std::numeric_limits<double>::infinity(), any_dist = best_dist;
      bool nearest_has_joint = false;
      for (Group& g : groups) {
        const double dist = tag_dist(g);
        if (dist < any_dist) any_dist = dist, nearest_has_joint = g.person.keypoints[k].v != 0;
        if (g.person.keypoints[k].v != 0) continue;
        if (dist < best_dist) best_dist = dist, best = &g;
      }
      if (opt.drop_duplicates && nearest_has_joint && any_dist < opt.match_radius) continue;
      if (!best || !(best_dist < opt.match_radius)) {
        groups.push_back({});
        best = &groups.back();
        best->person.keypoints.assign(nk, Keypoint{});
        best->tag_sum.assign(d, 0.0);
      }
      // Quarter-pixel refinement as in decode_keypoints.
      Keypoint kp;
      kp.x = static_cast<double>(p.x);
      kp.y = static_cast<double>(p.y);
      if (p.x > 0 && p.x + 1 < w) {
        const double dd = m[p.y * w + p.x + 1] - m[p.y * w + p.x - 1];
        kp.x += dd > 0 ? 0.25 : dd < 0 ? -0.25 : 0.0;
      }
      if (p.y > 0 && p.y + 1 < h) {
        const double dd = m[(p.y + 1) * w + p.x] - m[(p.y - 1) * w + p.x];
        kp.y += dd > 0 ? 0.25 : dd < 0 ? -0.25 : 0.0;
      }
      kp.v = 2;
      kp.score = std::clamp(p.value, 0.0, 1.0);
      best->person.keypoints[k] = kp;
      for (std::size_t j = 0; j < d; ++j) best->tag_sum[j] += tag[j];
      ++best->count;
      best->person.score += kp.score;
    }
  }
  std::vector<GroupedPerson> out;
  out.reserve(groups.size());
  for (Group& g : groups) {
    if (g.count < opt.min_joints) continue;
    g.person.tag.resize(d);
    for (std::size_t j = 0; j < d; ++j) g.person.tag[j] = g.tag_sum[j] / static_cast<double>(g.count);
    g.person.score /= static_cast<double>(g.count);
    out.push_back(std::move(g.person));
  }
  return out;
}

Tensor output_distill_loss(const Tensor& student, const Tensor& teacher) {
  if (student.shape() != teacher.shape()) {
    throw DimensionError("output distillation: student " + shape_str(student.shape()) + " vs teacher " +
                         shape_str(teacher.shape()));
  }
  return ops::mse(student, teacher.detach());
}

Tensor token_distill_loss(const PoseModel& student, const Tensor& token, const Tensor& images, const Tensor& k_gt,
                          const Tensor& k_t, bool with_output, std::size_t task, bool training, Rng* rng) {
  if (with_output && !k_t.defined()) throw std::invalid_argument("token-output distillation needs teacher heatmaps");
  RunOptions opt;
  opt.training = training;
  opt.rng = rng;
  opt.knowledge_token = token.detach();
  Tensor pred = student.forward(images, task, opt).heatmaps;
  if (pred.shape() != k_gt.shape()) {
    throw DimensionError("token distillation: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(k_gt.shape()));
  }
  Tensor loss = ops::mse(pred, k_gt.detach());
  if (with_output) loss = ops::add(loss, output_distill_loss(pred, k_t));
  return loss;
}

namespace {

// Restores requires_grad flags of a model's parameters on scope exit.
class FreezeGuard {
 public:
  explicit FreezeGuard(PoseModel& m) : model_(m) {
    for (auto& p : m.parameters()) {
      saved_.push_back(p.tensor.requires_grad());
      p.tensor.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    auto& ps = model_.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].tensor.set_requires_grad(saved_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  PoseModel& model_;
  std::vector<bool> saved_;
};

double token_loss(const PoseModel& teacher, const Tensor& token, const std::vector<TokenBatch>& batches,
                  std::size_t task, std::vector<double>* grad) {
  double total = 0.0;
  if (grad) grad->assign(token.numel(), 0.0);
  const double inv = 1.0 / static_cast<double>(batches.size());
  for (const TokenBatch& b : batches) {
    RunOptions opt;
    opt.knowledge_token = token;
    if (!grad) {
      total += ops::mse(teacher.forward(b.images, task, opt).heatmaps, b.targets).item() * inv;
      continue;
    }
    token.zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeGuard g(tape);
      loss = ops::mse(teacher.forward(b.images, task, opt).heatmaps, b.targets);
    }
    tape.backward(loss);
    total += loss.item() * inv;
    auto g = token.grad_view();
    for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i] * inv;
  }
  return total;
}

}  // namespace

TokenOptimResult optimize_knowledge_token(PoseModel& teacher, const std::vector<TokenBatch>& batches,
                                          const TokenOptimOptions& opt) {
  if (batches.empty()) throw std::invalid_argument("knowledge token optimisation needs at least one batch");
  const std::size_t c = teacher.config().backbone.dim;
  FreezeGuard freeze(teacher);
  Rng rng(opt.seed);
  Tensor token = rng.truncated_normal_tensor({c}, 0.02);
  token.set_requires_grad(true);

  TokenOptimResult out;
  std::vector<double> grad;
  double loss = token_loss(teacher, token, batches, opt.task, &grad);
  out.loss_trace.push_back(loss);
  double lr = opt.lr;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    const std::vector<double> start(token.values().begin(), token.values().end());
    bool accepted = false;
    for (int attempt = 0; attempt < 30 && !accepted; ++attempt) {
      auto v = token.mutable_values();
      for (std::size_t i = 0; i < c; ++i) v[i] = start[i] - lr * grad[i];
      const double trial = token_loss(teacher, token, batches, opt.task, nullptr);
      if (trial < loss) {
        accepted = true;
        loss = token_loss(teacher, token, batches, opt.task, &grad);
        lr *= 1.5;
      } else {
        lr *= 0.5;
      }
    }
    if (!accepted) std::copy(start.begin(), start.end(), token.mutable_values().begin());
    out.loss_trace.push_back(loss);
  }
  token.zero_grad();
  out.token.token = token.detach();
  out.token.source_teacher = parameter_digest(teacher);
  return out;
}

}  // namespace vitpose
