#pragma once

#include <cstddef>
#include <vector>

#include "vitpose/config.hpp"
#include "vitpose/tensor.hpp"

namespace vitpose {

struct FfnWeights {
  Tensor fc1_w, fc1_b;  // [C, H], [H]
  Tensor fc2_w, fc2_b;  // [H, C], [C]
};

/// Feed-forward weights for one block in any of the factorisation modes.
///   plain:  shared
///   i_ffn:  experts[t]
///   is_ffn: shared + experts[t]
///   ps_ffn: shared.fc1 feeds fc2_shared (H -> (1-a)C) and fc2_task[t] (H -> aC)
struct MoeFfnWeights {
  FfnMode mode = FfnMode::plain;
  FfnWeights shared;
  std::vector<FfnWeights> experts;
  Tensor fc2_shared_w, fc2_shared_b;
  std::vector<Tensor> fc2_task_w, fc2_task_b;

  std::size_t num_tasks() const;
};

Tensor ffn_forward(const Tensor& x, const FfnWeights& w, Activation act);
/// Routes x[..., C] through the branch for task; throws std::out_of_range on a bad index.
Tensor moe_ffn_forward(const Tensor& x, const MoeFfnWeights& w, std::size_t task, Activation act);
/// Single plain FFN equal to the ps_ffn path of one task (second layer stacked shared-first).
FfnWeights merge_ps_ffn(const MoeFfnWeights& w, std::size_t task);

struct MoeParamCounts {
  std::size_t plain = 0;
  std::size_t i_ffn_train = 0, i_ffn_inference = 0;
  std::size_t is_ffn_train = 0, is_ffn_inference = 0;
  std::size_t ps_ffn_train = 0, ps_ffn_inference = 0;
};

/// Backbone parameter totals for every factorisation mode with T tasks.
MoeParamCounts moe_param_count(const BackboneConfig& backbone, std::size_t num_tasks, double partition_ratio);

}  // namespace vitpose
