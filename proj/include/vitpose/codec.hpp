#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vitpose/model.hpp"
#include "vitpose/tensor.hpp"

namespace vitpose {

/// Position in heatmap (or image) pixels. v: 0 unlabeled, 1 occluded, 2 visible.
struct Keypoint {
  double x = 0.0, y = 0.0;
  int v = 0;
  double score = 0.0;
};

using Pose = std::vector<Keypoint>;

struct HeatmapTargets {
  Tensor heatmaps;  // [Nk, h, w]
  Tensor weights;  // [Nk]
};

/// Gaussian of width sigma centred on the keypoint, scaled to 1 at the nearest cell.
/// Unlabeled keypoints and keypoints whose cell falls outside the grid get a zero map and weight 0.
HeatmapTargets encode_targets(const Pose& keypoints, std::size_t h, std::size_t w, double sigma);
/// Stacks per-instance targets into [N, Nk, h, w] and weights [N, Nk].
HeatmapTargets encode_batch(const std::vector<Pose>& poses, std::size_t h, std::size_t w, double sigma);

/// Argmax per channel (lowest flat index on ties), shifted a quarter pixel toward the
/// larger neighbour on each axis. score = peak clamped to [0, 1].
Pose decode_keypoints(const Tensor& heatmaps);
/// [N, Nk, h, w] -> one pose per sample.
std::vector<Pose> decode_batch(const Tensor& heatmaps);

/// Mean squared error over each map, averaged over keypoints with nonzero weight.
/// pred/target [N, Nk, h, w], weight [N, Nk].
Tensor heatmap_mse_loss(const Tensor& pred, const Tensor& target, const Tensor& weight);

struct AeLoss {
  Tensor pull, push, total;
};

/// Associative-embedding loss. tags [N, Nk*tag_dim, h, w]; persons[n] lists the poses of
/// image n in heatmap coordinates. pull: mean over persons of the mean squared distance of
/// their keypoint tags to the person mean tag. push: sum over person pairs of
/// exp(-|m_i - m_j|^2 / 2). Images without persons are skipped; the result is averaged
/// over images that have any. pull_radius > 0 also pulls every cell within that Chebyshev
/// distance of each keypoint cell, so tags stay consistent where a peak may land.
AeLoss ae_loss(const Tensor& tags, const std::vector<std::vector<Pose>>& persons, std::size_t tag_dim = 1,
               std::size_t pull_radius = 0);

struct GroupedPerson {
  Pose keypoints;  // Nk entries; missing joints have v = 0
  std::vector<double> tag;  // mean tag
  double score = 0.0;  // mean peak value of the grouped joints
};

struct GroupOptions {
  double threshold = 0.1;
  double match_radius = 1.0;
  std::size_t tag_dim = 1;
  std::size_t nms_radius = 1;  // a peak is the maximum of its (2r+1)^2 neighbourhood
  std::size_t min_joints = 1;  // groups with fewer joints are dropped
  bool drop_duplicates = false;  // discard a peak whose nearest group already holds that joint
};

/// Greedy grouping of local heatmap peaks by tag. heatmaps [Nk, h, w], tags [Nk*tag_dim, h, w].
/// Joints are processed in channel order and peaks by descending value; a peak joins the
/// nearest group (by mean tag) that lacks this joint when the distance is below match_radius,
/// otherwise it starts a new group. With drop_duplicates, a peak within match_radius of a
/// group that already holds this joint is discarded instead.
std::vector<GroupedPerson> ae_group(const Tensor& heatmaps, const Tensor& tags, const GroupOptions& opt = {});

/// MSE(student, teacher) with the teacher detached.
Tensor output_distill_loss(const Tensor& student, const Tensor& teacher);

/// Student forward with the frozen knowledge token appended. Returns MSE(S, K_gt), plus
/// MSE(S, K_t) when with_output is set (K_t must then be defined).
Tensor token_distill_loss(const PoseModel& student, const Tensor& token, const Tensor& images, const Tensor& k_gt,
                          const Tensor& k_t = Tensor(), bool with_output = false, std::size_t task = 0,
                          bool training = false, Rng* rng = nullptr);

struct KnowledgeToken {
  Tensor token;  // [C]
  std::string source_teacher;  // parameter digest of the teacher
};

struct TokenBatch {
  Tensor images;  // [N, 3, H, W]
  Tensor targets;  // [N, Nk, h, w]
};

struct TokenOptimOptions {
  std::size_t steps = 200;
  double lr = 1.0;
  std::uint64_t seed = 0;
  std::size_t task = 0;
};

struct TokenOptimResult {
  KnowledgeToken token;
  std::vector<double> loss_trace;  // steps + 1 entries, starting with the initial loss
};

/// Fits the knowledge token against a frozen teacher by gradient descent with a
/// backtracking step size, so the recorded loss never increases. Teacher parameters
/// and buffers are left untouched.
TokenOptimResult optimize_knowledge_token(PoseModel& teacher, const std::vector<TokenBatch>& batches,
                                          const TokenOptimOptions& opt = {});

}  // namespace vitpose
