#include "vitpose/moe.hpp"

#include <stdexcept>
#include <string>

#include "vitpose/flops.hpp"
#include "vitpose/model.hpp"
#include "vitpose/ops.hpp"

namespace vitpose {

namespace {

Tensor activate(const Tensor& x, Activation act) { return act == Activation::gelu ? ops::gelu(x) : ops::relu(x); }

Tensor scoped_linear(const char* name, const Tensor& x, const Tensor& w, const Tensor& b) {
  FlopScope s(name);
  return ops::linear(x, w, b);
}

}  // namespace

std::size_t MoeFfnWeights::num_tasks() const {
  switch (mode) {
    case FfnMode::plain:
      return 1;
    case FfnMode::i_ffn:
    case FfnMode::is_ffn:
      return experts.size();
    case FfnMode::ps_ffn:
      return fc2_task_w.size();
  }
  return 1;
}

Tensor ffn_forward(const Tensor& x, const FfnWeights& w, Activation act) {
  Tensor h = activate(scoped_linear("fc1", x, w.fc1_w, w.fc1_b), act);
  return scoped_linear("fc2", h, w.fc2_w, w.fc2_b);
}

Tensor moe_ffn_forward(const Tensor& x, const MoeFfnWeights& w, std::size_t task, Activation act) {
  if (w.mode != FfnMode::plain && task >= w.num_tasks()) {
    throw std::out_of_range("task index " + std::to_string(task) + " >= " + std::to_string(w.num_tasks()) + " tasks");
  }
  switch (w.mode) {
    case FfnMode::plain:
      return ffn_forward(x, w.shared, act);
    case FfnMode::i_ffn: {
      FlopScope s("experts." + std::to_string(task));
      return ffn_forward(x, w.experts[task], act);
    }
    case FfnMode::is_ffn: {
      Tensor shared, expert;
      {
        FlopScope s("shared");
        shared = ffn_forward(x, w.shared, act);
      }
      {
        FlopScope s("experts." + std::to_string(task));
        expert = ffn_forward(x, w.experts[task], act);
      }
      return ops::add(shared, expert);
    }
    case FfnMode::ps_ffn: {
      Tensor h = activate(scoped_linear("fc1", x, w.shared.fc1_w, w.shared.fc1_b), act);
      Tensor a = scoped_linear("fc2_shared", h, w.fc2_shared_w, w.fc2_shared_b);
      Tensor b = scoped_linear("fc2_task", h, w.fc2_task_w[task], w.fc2_task_b[task]);
      return ops::concat({a, b}, a.rank() - 1);
    }
  }
  throw std::logic_error("unhandled ffn mode");
}

FfnWeights merge_ps_ffn(const MoeFfnWeights& w, std::size_t task) {
  if (w.mode != FfnMode::ps_ffn) throw std::invalid_argument("merge_for_inference requires a ps_ffn model");
  if (task >= w.fc2_task_w.size()) throw std::out_of_range("task index " + std::to_string(task) + " out of range");
  FfnWeights m;
  m.fc1_w = w.shared.fc1_w.detach();
  m.fc1_b = w.shared.fc1_b.detach();
  m.fc2_w = ops::concat({w.fc2_shared_w.detach(), w.fc2_task_w[task].detach()}, 1);
  m.fc2_b = ops::concat({w.fc2_shared_b.detach(), w.fc2_task_b[task].detach()}, 0);
  return m;
}

MoeParamCounts moe_param_count(const BackboneConfig& backbone, std::size_t num_tasks, double partition_ratio) {
  ModelConfig cfg;
  cfg.backbone = backbone;
  cfg.tasks.clear();
  for (std::size_t t = 0; t < num_tasks; ++t) cfg.tasks.push_back({"task" + std::to_string(t), 17});
  cfg.moe.partition_ratio = partition_ratio;

  const std::size_t c = backbone.dim, h = backbone.hidden(), depth = backbone.depth;
  const std::size_t ffn = c * h + h + h * c + c;
  cfg.moe.mode = FfnMode::plain;
  const std::size_t base = backbone_parameter_count(cfg);
  const std::size_t without_ffn = base - depth * ffn;

  MoeParamCounts r;
  r.plain = base;
  cfg.moe.mode = FfnMode::i_ffn;
  r.i_ffn_train = backbone_parameter_count(cfg);
  r.i_ffn_inference = base;
  cfg.moe.mode = FfnMode::is_ffn;
  r.is_ffn_train = backbone_parameter_count(cfg);
  // One task expert plus the shared FFN are live at inference.
  r.is_ffn_inference = without_ffn + depth * 2 * ffn;
  cfg.moe.mode = FfnMode::ps_ffn;
  r.ps_ffn_train = backbone_parameter_count(cfg);
  // Merging stacks the task rows into the shared layer, so the plain count remains.
  r.ps_ffn_inference = base;
  return r;
}

}  // namespace vitpose
