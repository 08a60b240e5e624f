#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace vitpose {

enum class AttentionMode { full, window, window_shift, window_pool, window_shift_pool };
enum class FfnMode { plain, i_ffn, is_ffn, ps_ffn };
enum class DecoderKind { classic, classic_fp, simple, minimal, bottom_up_ae };
enum class Activation { gelu, relu };

bool is_window_mode(AttentionMode m);
bool uses_shift(AttentionMode m);
bool uses_pool(AttentionMode m);

struct BackboneConfig {
  std::string name = "tiny_desk";
  std::size_t depth = 2;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t patch_size = 4;
  std::size_t stride = 4;
  double mlp_ratio = 4.0;
  AttentionMode attention_mode = AttentionMode::full;
  std::array<std::size_t, 2> window_size{8, 8};
  double drop_path_rate = 0.0;
  std::array<std::size_t, 2> input_hw{32, 24};
  bool rel_pos_bias = false;
  Activation activation = Activation::gelu;

  std::size_t hidden() const;
  std::size_t patch_pad() const { return (patch_size - stride) / 2; }
  std::size_t grid_h() const { return input_hw[0] / stride; }
  std::size_t grid_w() const { return input_hw[1] / stride; }
};

struct MoEConfig {
  FfnMode mode = FfnMode::plain;
  double partition_ratio = 0.25;
};

struct DecoderConfig {
  DecoderKind kind = DecoderKind::classic;
  std::size_t deconv_channels = 256;
  std::size_t tag_dim = 1;
};

struct TaskSpec {
  std::string name = "coco";
  std::size_t num_keypoints = 17;
};

struct ModelConfig {
  BackboneConfig backbone;
  MoEConfig moe;
  DecoderConfig decoder;
  std::vector<TaskSpec> tasks{TaskSpec{}};

  std::size_t num_tasks() const { return tasks.size(); }
  /// Output channels of the task-specific expert in ps_ffn (alpha * C).
  std::size_t task_channels() const;
  std::size_t task_index(const std::string& name) const;
};

/// Standard configurations: vit_s, vit_b, vit_l, vit_h and the test-scale tiny_desk.
BackboneConfig backbone_preset(const std::string& name);
/// Throws std::invalid_argument describing the first violated constraint.
void validate(const ModelConfig& cfg);

struct FreezeMask {
  bool freeze_mhsa = false;
  bool freeze_ffn = false;
  bool freeze_patch_embed = false;
};

struct TrainConfig {
  double base_lr = 5e-4;
  double weight_decay = 0.1;
  double layer_wise_decay = 0.75;
  std::size_t batch_size = 8;
  std::size_t epochs = 210;
  std::vector<std::size_t> lr_drop_epochs{170, 200};
  double lr_drop_factor = 0.1;
  std::size_t warmup_iters = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::size_t checkpoint_every = 0;  // epochs; 0: only at the end
  double sigma = 2.0;
  double target_error_px = 0.0;  // early stop when decoded error falls below; 0 disables
  std::size_t eval_every = 50;
  FreezeMask freeze;
  bool round_params_to_float = true;
};

void validate(const TrainConfig& cfg);

/// Published optimiser settings for a backbone preset (vit_s .. vit_h): AdamW lr 5e-4 at
/// batch 512, or 1e-3 at batch 1024 for a multi-task model, weight decay 0.1 and the
/// model's layer-wise decay. A nonzero batch_size rescales the lr linearly from the
/// reference batch and is stored in the result.
TrainConfig train_preset(const std::string& backbone, bool multi_task, std::size_t batch_size = 0);

struct DataConfig {
  std::string source = "synth";  // synth | coco
  std::size_t num_images = 64;
  std::size_t min_persons = 1;
  std::size_t max_persons = 1;
  std::string annotations;
  std::string image_root;
  std::string dataset_spec;
  bool augment = false;
  std::uint64_t data_seed = 0;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);
void to_json(nlohmann::json& j, const MoEConfig& c);
void from_json(const nlohmann::json& j, MoEConfig& c);
void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);
void to_json(nlohmann::json& j, const TaskSpec& c);
void from_json(const nlohmann::json& j, TaskSpec& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const FreezeMask& c);
void from_json(const nlohmann::json& j, FreezeMask& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Applies "a.b.c=value" to a JSON document. The path must already exist; the
/// value is parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// FNV-1a 64-bit digest of the canonical (sorted, compact) JSON dump, as 16 hex digits.
std::string config_digest(const nlohmann::json& doc);

}  // namespace vitpose
