#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vitpose/codec.hpp"
#include "vitpose/config.hpp"
#include "vitpose/data.hpp"
#include "vitpose/model.hpp"

namespace vitpose {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Shape shape;
  std::vector<double> m, v;
  std::size_t t = 0;
};

/// One AdamW update in place. The decoupled decay p <- p * (1 - lr * wd) is applied
/// first, then p <- p - lr * m_hat / (sqrt(v_hat) + eps). Throws DimensionError when the
/// parameter shape differs from the one the state was created with.
void adamw_step(Tensor& param, std::span<const double> grad, AdamState& state, double lr, double wd,
                const AdamHyper& h = {});

/// base_lr * decay^(total - index). Throws std::out_of_range when index > total.
double layerwise_lr(double base_lr, double decay, std::size_t index, std::size_t total);

/// Multiplier: linear warmup step / warmup_iters (1 when warmup_iters is 0), times
/// lr_drop_factor for every drop epoch strictly below `epoch` (epochs count from 1).
double lr_schedule(std::size_t step, std::size_t epoch, const TrainConfig& cfg);

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(std::size_t step)
      : std::runtime_error("non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Learning rate of every trainable parameter at multiplier 1.
std::map<std::string, double> parameter_lrs(const PoseModel& model, const TrainConfig& cfg);

/// AdamW over a model's trainable parameters with per-parameter layer-wise lr and
/// weight-decay flags.
class Optimizer {
 public:
  Optimizer(const PoseModel& model, const TrainConfig& cfg);
  /// Applies one update with the given schedule multiplier; parameters without a
  /// gradient are skipped.
  void step(PoseModel& model, double multiplier);

 private:
  TrainConfig cfg_;
  std::map<std::string, double> lr_;
  std::map<std::string, bool> decay_;
  std::map<std::string, AdamState> state_;
};

struct TrainOptions {
  std::uint64_t seed = 0;
  std::string checkpoint_dir;  // empty: no checkpoints
  nlohmann::json checkpoint_extra = nlohmann::json::object();
  Tensor knowledge_token;  // frozen token appended to every student forward
  const PoseModel* teacher = nullptr;  // adds MSE to the teacher's heatmaps
  double ae_weight = 1.0;  // bottom-up tag loss weight
  std::size_t ae_pull_radius = 0;  // see ae_loss
  std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainRun {
  std::vector<double> loss_trace;
  std::vector<std::pair<std::size_t, double>> error_trace;  // (step, mean keypoint error in heatmap px)
  std::size_t steps = 0;
  double final_error_px = 0.0;
  std::vector<std::string> checkpoints;
};

/// Keypoints from input-pixel to heatmap-pixel coordinates (pixel centres at integers).
Pose to_heatmap_coords(const Pose& pose, std::size_t in_h, std::size_t in_w, std::size_t hm_h, std::size_t hm_w);

/// Mean distance between decoded and true labeled keypoints, in heatmap pixels (eval mode).
double mean_keypoint_error(const PoseModel& model, const std::vector<CropSample>& data);

/// Top-down training with heatmap MSE. Samples are grouped into per-task pools and drawn by
/// a MultitaskSampler seeded with opt.seed. Stops after max_steps (or all epochs), or early
/// when target_error_px is reached at an evaluation point.
TrainRun train(PoseModel& model, const std::vector<CropSample>& data, const TrainConfig& cfg,
               const TrainOptions& opt = {});

/// Bottom-up training: heatmap MSE on all persons plus ae_weight times the tag loss.
TrainRun train_bottom_up(PoseModel& model, const std::vector<BottomUpSample>& data, const TrainConfig& cfg,
                         const TrainOptions& opt = {});

struct MimOptions {
  double mask_ratio = 0.75;
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
};

/// [N, T] with exactly round(ratio * T) ones per row at random positions.
Tensor random_patch_mask(std::size_t n, std::size_t t, double ratio, Rng& rng);
/// Non-overlapping patches [N, T, 3 p^2] in token order.
Tensor patchify(const Tensor& images, std::size_t patch);
/// Mean over masked tokens of the per-token mean squared error; 0 when nothing is masked.
Tensor mim_loss(const Tensor& pred, const Tensor& target, const Tensor& mask);

struct MimResult {
  std::vector<double> loss_trace;
};

/// Masked-patch reconstruction through a learned mask token and a linear head, both
/// discarded afterwards. Only backbone parameters of the model are updated.
MimResult pretrain_mim(PoseModel& model, const std::vector<Tensor>& images, const MimOptions& opt = {});

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::size_t step = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// "VPCK", u32 version, u64 metadata length, metadata JSON, then float32 tensors in
/// directory order (parameters, then buffers), all little-endian.
std::vector<std::uint8_t> serialize_checkpoint(const PoseModel& model, const CheckpointMeta& meta = {});
void save_checkpoint(const PoseModel& model, const std::string& path, const CheckpointMeta& meta = {});

struct LoadedCheckpoint {
  PoseModel model;
  CheckpointMeta meta;
};

/// Validates the whole file before building a model. Throws CheckpointError on a bad
/// magic, an unknown version, malformed metadata, or a truncated payload.
LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
LoadedCheckpoint load_checkpoint(const std::string& path);

struct TensorContainer {
  std::vector<NamedTensor> tensors;
  nlohmann::json extra = nlohmann::json::object();
};

/// Free-standing named tensors in the same byte format, with a null model section.
std::vector<std::uint8_t> serialize_tensors(const std::vector<NamedTensor>& tensors,
                                            const nlohmann::json& extra = nlohmann::json::object());
TensorContainer deserialize_tensors(const std::vector<std::uint8_t>& bytes);
void save_tensors(const std::vector<NamedTensor>& tensors, const std::string& path,
                  const nlohmann::json& extra = nlohmann::json::object());
TensorContainer load_tensors(const std::string& path);

}  // namespace vitpose
