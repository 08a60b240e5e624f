#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "vitpose/backbone.hpp"
#include "vitpose/config.hpp"
#include "vitpose/decoders.hpp"
#include "vitpose/rng.hpp"
#include "vitpose/tensor.hpp"

namespace vitpose {

enum class ParamInit { trunc_normal, zeros, ones, ps_shared, ps_task };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init = ParamInit::trunc_normal;
  bool weight_decay = true;
  bool trainable = true;
};

/// Every learnable tensor of a model in a fixed order.
std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg);
/// Non-learnable state (batch-norm running statistics).
std::vector<ParamSpec> buffer_specs(const ModelConfig& cfg);

std::size_t parameter_count(const ModelConfig& cfg);
/// Parameters under "backbone." (patch embedding, position embedding, blocks, final norm).
std::size_t backbone_parameter_count(const ModelConfig& cfg);
/// Parameters of one task's head.
std::size_t decoder_parameter_count(const ModelConfig& cfg, std::size_t task = 0);

/// Layer id for layer-wise lr decay: embeddings 0, block i -> i + 1, everything after the
/// last block (final norm, heads) -> depth + 1.
std::size_t layer_index(const std::string& param_name, std::size_t depth);
std::size_t num_layer_ids(std::size_t depth);

enum class ParamGroup { patch_embed, mhsa, ffn, norm, head, other };
ParamGroup param_group(const std::string& name);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct RunOptions {
  bool training = false;
  Rng* rng = nullptr;
  Tensor knowledge_token;  // [C]; appended after the patch embedding when defined
  Tensor mask_token;  // [C]; replaces masked patches (MIM) when defined
  Tensor mask;  // [N, T] of 0/1
};

class PoseModel {
 public:
  PoseModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<NamedTensor>& buffers() { return buffers_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return index_.count(name) > 0; }
  bool trainable(const std::string& name) const;
  std::size_t num_parameters() const;
  std::size_t num_trainable_parameters() const;

  void apply_freeze(const FreezeMask& mask);
  /// Marks one parameter (un)trainable; frozen ones get requires_grad = false.
  void set_trainable(const std::string& name, bool on);
  /// Rounds all parameters and buffers to single precision in place.
  void round_to_float();
  void zero_grad();

  /// Tokens [N, T, C] after the final norm (knowledge token removed).
  Tensor encode(const Tensor& images, std::size_t task, const RunOptions& opt) const;
  /// Tokens to the feature map [N, C, gh, gw].
  Tensor to_grid(const Tensor& tokens, std::size_t gh, std::size_t gw) const;
  DecoderOutput decode_head(const Tensor& features, std::size_t task, bool training) const;
  DecoderOutput forward(const Tensor& images, std::size_t task, const RunOptions& opt = {}) const;

  const BlockWeights& block(std::size_t i) const { return blocks_.at(i); }
  const DecoderWeights& head(std::size_t task) const { return heads_.at(task); }

  /// Copies values (not storage) from another model with the same parameter names.
  void load_state(const std::vector<NamedTensor>& params, const std::vector<NamedTensor>& buffers);

 private:
  void bind();
  Tensor& mutable_param(const std::string& name);

  ModelConfig cfg_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, std::size_t> buffer_index_;
  std::unordered_map<std::string, bool> trainable_;
  std::vector<BlockWeights> blocks_;
  std::vector<DecoderWeights> heads_;
};

/// FNV-1a digest over parameter names and value bits, as 16 hex digits.
std::string parameter_digest(const PoseModel& model);

/// Single-task plain-FFN model whose forward equals the ps_ffn model's forward for task.
PoseModel merge_for_inference(const PoseModel& model, std::size_t task);

/// Per-layer MACs of one forward pass computed from shapes alone; keys match the
/// names recorded by an executed forward under a FlopCounter.
std::map<std::string, std::uint64_t> analytic_flops(const ModelConfig& cfg, std::size_t height, std::size_t width,
                                                    std::size_t batch = 1, std::size_t task = 0,
                                                    bool knowledge_token = false);
std::uint64_t sum_with_prefix(const std::map<std::string, std::uint64_t>& flops, const std::string& prefix);

}  // namespace vitpose
