#include "vitpose/model.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

#include "vitpose/flops.hpp"
#include "vitpose/moe.hpp"
#include "vitpose/ops.hpp"

namespace vitpose {

namespace {

constexpr double kInitStd = 0.02;

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in, std::size_t outc,
                ParamInit winit = ParamInit::trunc_normal) {
  out.push_back({prefix + ".weight", {in, outc}, winit, true, true});
  out.push_back({prefix + ".bias", {outc}, ParamInit::zeros, false, true});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t c) {
  out.push_back({prefix + ".weight", {c}, ParamInit::ones, false, true});
  out.push_back({prefix + ".bias", {c}, ParamInit::zeros, false, true});
}

std::string block_prefix(std::size_t i) { return "backbone.blocks." + std::to_string(i); }
std::string head_prefix(const ModelConfig& cfg, std::size_t t) { return "decoders." + cfg.tasks[t].name; }

std::size_t head_out_channels(const ModelConfig& cfg, std::size_t t) {
  const std::size_t nk = cfg.tasks[t].num_keypoints;
  switch (cfg.decoder.kind) {
    case DecoderKind::minimal:
      return 16 * nk;
    case DecoderKind::bottom_up_ae:
      return nk * (1 + cfg.decoder.tag_dim);
    default:
      return nk;
  }
}

void add_head(std::vector<ParamSpec>& out, const ModelConfig& cfg, std::size_t t) {
  const std::string p = head_prefix(cfg, t);
  const std::size_t c = cfg.backbone.dim, d = cfg.decoder.deconv_channels;
  const std::size_t oc = head_out_channels(cfg, t);
  const auto kind = cfg.decoder.kind;
  auto deconv_bn = [&](const std::string& name, const std::string& bn, std::size_t in) {
    out.push_back({p + "." + name + ".weight", {in, d, 4, 4}, ParamInit::trunc_normal, true, true});
    add_norm(out, p + "." + bn, d);
  };
  if (kind == DecoderKind::classic || kind == DecoderKind::classic_fp) {
    deconv_bn("deconv1", "bn1", c);
    deconv_bn("deconv2", "bn2", d);
    const bool fixed = kind == DecoderKind::classic_fp;
    out.push_back({p + ".final.weight", {oc, d, 1, 1}, ParamInit::trunc_normal, true, !fixed});
    out.push_back({p + ".final.bias", {oc}, ParamInit::zeros, false, !fixed});
  } else if (kind == DecoderKind::bottom_up_ae) {
    deconv_bn("deconv1", "bn1", c);
    out.push_back({p + ".final.weight", {oc, d, 1, 1}, ParamInit::trunc_normal, true, true});
    out.push_back({p + ".final.bias", {oc}, ParamInit::zeros, false, true});
  } else {
    const std::size_t k = kind == DecoderKind::simple ? 3 : 1;
    out.push_back({p + ".final.weight", {oc, c, k, k}, ParamInit::trunc_normal, true, true});
    out.push_back({p + ".final.bias", {oc}, ParamInit::zeros, false, true});
  }
}

// Copies columns [start, start+len) of a row-major [rows, cols] matrix.
Tensor columns(const Tensor& m, std::size_t start, std::size_t len) {
  Tensor out({m.dim(0), len});
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    for (std::size_t j = 0; j < len; ++j) out.data()[r * len + j] = m.at(r * m.dim(1) + start + j);
  }
  return out;
}

}  // namespace

std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  validate(cfg);
  const auto& b = cfg.backbone;
  const std::size_t c = b.dim, h = b.hidden(), tasks = cfg.num_tasks();
  std::vector<ParamSpec> out;
  out.push_back({"backbone.patch_embed.weight", {c, 3, b.patch_size, b.patch_size}, ParamInit::trunc_normal, true, true});
  out.push_back({"backbone.patch_embed.bias", {c}, ParamInit::zeros, false, true});
  out.push_back({"backbone.pos_embed", {b.grid_h() * b.grid_w(), c}, ParamInit::trunc_normal, false, true});
  for (std::size_t i = 0; i < b.depth; ++i) {
    const std::string p = block_prefix(i);
    add_norm(out, p + ".norm1", c);
    add_linear(out, p + ".attn.qkv", c, 3 * c);
    add_linear(out, p + ".attn.proj", c, c);
    if (b.rel_pos_bias && is_window_mode(b.attention_mode)) {
      out.push_back({p + ".attn.rel_pos_table",
                     {(2 * b.window_size[0] - 1) * (2 * b.window_size[1] - 1), b.heads},
                     ParamInit::zeros,
                     false,
                     true});
    }
    add_norm(out, p + ".norm2", c);
    switch (cfg.moe.mode) {
      case FfnMode::plain:
        add_linear(out, p + ".ffn.fc1", c, h);
        add_linear(out, p + ".ffn.fc2", h, c);
        break;
      case FfnMode::i_ffn:
        for (std::size_t t = 0; t < tasks; ++t) {
          add_linear(out, p + ".ffn.experts." + std::to_string(t) + ".fc1", c, h);
          add_linear(out, p + ".ffn.experts." + std::to_string(t) + ".fc2", h, c);
        }
        break;
      case FfnMode::is_ffn:
        add_linear(out, p + ".ffn.shared.fc1", c, h);
        add_linear(out, p + ".ffn.shared.fc2", h, c);
        for (std::size_t t = 0; t < tasks; ++t) {
          add_linear(out, p + ".ffn.experts." + std::to_string(t) + ".fc1", c, h);
          add_linear(out, p + ".ffn.experts." + std::to_string(t) + ".fc2", h, c, ParamInit::zeros);
        }
        break;
      case FfnMode::ps_ffn: {
        const std::size_t a = cfg.task_channels();
        add_linear(out, p + ".ffn.fc1", c, h);
        add_linear(out, p + ".ffn.fc2_shared", h, c - a, ParamInit::ps_shared);
        for (std::size_t t = 0; t < tasks; ++t) add_linear(out, p + ".ffn.fc2_task." + std::to_string(t), h, a, ParamInit::ps_task);
        break;
      }
    }
  }
  add_norm(out, "backbone.norm", c);
  for (std::size_t t = 0; t < tasks; ++t) add_head(out, cfg, t);
  return out;
}

std::vector<ParamSpec> buffer_specs(const ModelConfig& cfg) {
  std::vector<ParamSpec> out;
  const auto kind = cfg.decoder.kind;
  const std::size_t d = cfg.decoder.deconv_channels;
  std::vector<std::string> bns;
  if (kind == DecoderKind::classic || kind == DecoderKind::classic_fp) bns = {"bn1", "bn2"};
  if (kind == DecoderKind::bottom_up_ae) bns = {"bn1"};
  for (std::size_t t = 0; t < cfg.num_tasks(); ++t) {
    for (const auto& bn : bns) {
      out.push_back({head_prefix(cfg, t) + "." + bn + ".running_mean", {d}, ParamInit::zeros, false, false});
      out.push_back({head_prefix(cfg, t) + "." + bn + ".running_var", {d}, ParamInit::ones, false, false});
    }
  }
  return out;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : parameter_specs(cfg)) n += shape_numel(s.shape);
  return n;
}

std::size_t backbone_parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : parameter_specs(cfg)) {
    if (s.name.rfind("backbone.", 0) == 0) n += shape_numel(s.shape);
  }
  return n;
}

std::size_t decoder_parameter_count(const ModelConfig& cfg, std::size_t task) {
  const std::string p = head_prefix(cfg, task) + ".";
  std::size_t n = 0;
  for (const auto& s : parameter_specs(cfg)) {
    if (s.name.rfind(p, 0) == 0) n += shape_numel(s.shape);
  }
  return n;
}

std::size_t layer_index(const std::string& name, std::size_t depth) {
  if (name.rfind("backbone.patch_embed", 0) == 0 || name == "backbone.pos_embed" || name == "mask_token") return 0;
  const std::string blocks = "backbone.blocks.";
  if (name.rfind(blocks, 0) == 0) {
    const std::size_t i = std::stoul(name.substr(blocks.size()));
    if (i >= depth) throw std::out_of_range("block index out of range in " + name);
    return i + 1;
  }
  return depth + 1;
}

std::size_t num_layer_ids(std::size_t depth) { return depth + 2; }

ParamGroup param_group(const std::string& name) {
  if (name.rfind("decoders.", 0) == 0) return ParamGroup::head;
  if (name.find("patch_embed") != std::string::npos || name == "backbone.pos_embed") return ParamGroup::patch_embed;
  if (name.find(".attn.") != std::string::npos) return ParamGroup::mhsa;
  if (name.find(".ffn.") != std::string::npos) return ParamGroup::ffn;
  if (name.find("norm") != std::string::npos) return ParamGroup::norm;
  return ParamGroup::other;
}

// ---- PoseModel --------------------------------------------------------------

PoseModel::PoseModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  Rng rng(seed);
  Tensor pending_fc2;
  const std::size_t a = cfg_.task_channels();
  for (const auto& s : parameter_specs(cfg_)) {
    Tensor t;
    switch (s.init) {
      case ParamInit::trunc_normal:
        t = rng.truncated_normal_tensor(s.shape, kInitStd);
        break;
      case ParamInit::zeros:
        t = Tensor(s.shape, 0.0);
        break;
      case ParamInit::ones:
        t = Tensor(s.shape, 1.0);
        break;
      case ParamInit::ps_shared: {
        // Shared and task experts start as slices of one plain second-layer weight.
        const std::size_t c = cfg_.backbone.dim;
        pending_fc2 = rng.truncated_normal_tensor({s.shape[0], c}, kInitStd);
        t = columns(pending_fc2, 0, c - a);
        break;
      }
      case ParamInit::ps_task:
        t = columns(pending_fc2, cfg_.backbone.dim - a, a);
        break;
    }
    t.set_requires_grad(s.trainable);
    trainable_[s.name] = s.trainable;
    index_[s.name] = params_.size();
    params_.push_back({s.name, t});
  }
  for (const auto& s : buffer_specs(cfg_)) {
    buffer_index_[s.name] = buffers_.size();
    buffers_.push_back({s.name, Tensor(s.shape, s.init == ParamInit::ones ? 1.0 : 0.0)});
  }
  round_to_float();
  bind();
}

const Tensor& PoseModel::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].tensor;
}

Tensor& PoseModel::mutable_param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].tensor;
}

bool PoseModel::trainable(const std::string& name) const {
  auto it = trainable_.find(name);
  if (it == trainable_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

std::size_t PoseModel::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t PoseModel::num_trainable_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (trainable_.at(p.name)) n += p.tensor.numel();
  }
  return n;
}

void PoseModel::set_trainable(const std::string& name, bool on) {
  mutable_param(name).set_requires_grad(on);
  trainable_[name] = on;
}

void PoseModel::apply_freeze(const FreezeMask& mask) {
  for (auto& p : params_) {
    const ParamGroup g = param_group(p.name);
    if ((mask.freeze_mhsa && g == ParamGroup::mhsa) || (mask.freeze_ffn && g == ParamGroup::ffn) ||
        (mask.freeze_patch_embed && g == ParamGroup::patch_embed)) {
      set_trainable(p.name, false);
    }
  }
}

void PoseModel::round_to_float() {
  auto round = [](std::vector<NamedTensor>& v) {
    for (auto& p : v) {
      for (double& x : p.tensor.mutable_values()) x = static_cast<double>(static_cast<float>(x));
    }
  };
  round(params_);
  round(buffers_);
}

void PoseModel::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void PoseModel::bind() {
  const auto& b = cfg_.backbone;
  blocks_.clear();
  auto get = [&](const std::string& n) { return param(n); };
  auto ffn = [&](const std::string& p) {
    return FfnWeights{get(p + ".fc1.weight"), get(p + ".fc1.bias"), get(p + ".fc2.weight"), get(p + ".fc2.bias")};
  };
  for (std::size_t i = 0; i < b.depth; ++i) {
    const std::string p = block_prefix(i);
    BlockWeights w;
    w.norm1_g = get(p + ".norm1.weight");
    w.norm1_b = get(p + ".norm1.bias");
    w.attn.qkv_w = get(p + ".attn.qkv.weight");
    w.attn.qkv_b = get(p + ".attn.qkv.bias");
    w.attn.proj_w = get(p + ".attn.proj.weight");
    w.attn.proj_b = get(p + ".attn.proj.bias");
    if (has_param(p + ".attn.rel_pos_table")) w.attn.rel_table = get(p + ".attn.rel_pos_table");
    w.norm2_g = get(p + ".norm2.weight");
    w.norm2_b = get(p + ".norm2.bias");
    w.ffn.mode = cfg_.moe.mode;
    switch (cfg_.moe.mode) {
      case FfnMode::plain:
        w.ffn.shared = ffn(p + ".ffn");
        break;
      case FfnMode::is_ffn:
        w.ffn.shared = ffn(p + ".ffn.shared");
        [[fallthrough]];
      case FfnMode::i_ffn:
        for (std::size_t t = 0; t < cfg_.num_tasks(); ++t) w.ffn.experts.push_back(ffn(p + ".ffn.experts." + std::to_string(t)));
        break;
      case FfnMode::ps_ffn:
        w.ffn.shared.fc1_w = get(p + ".ffn.fc1.weight");
        w.ffn.shared.fc1_b = get(p + ".ffn.fc1.bias");
        w.ffn.fc2_shared_w = get(p + ".ffn.fc2_shared.weight");
        w.ffn.fc2_shared_b = get(p + ".ffn.fc2_shared.bias");
        for (std::size_t t = 0; t < cfg_.num_tasks(); ++t) {
          w.ffn.fc2_task_w.push_back(get(p + ".ffn.fc2_task." + std::to_string(t) + ".weight"));
          w.ffn.fc2_task_b.push_back(get(p + ".ffn.fc2_task." + std::to_string(t) + ".bias"));
        }
        break;
    }
    blocks_.push_back(std::move(w));
  }
  heads_.clear();
  auto buf = [&](const std::string& n) { return buffers_.at(buffer_index_.at(n)).tensor; };
  for (std::size_t t = 0; t < cfg_.num_tasks(); ++t) {
    const std::string p = head_prefix(cfg_, t);
    DecoderWeights d;
    d.kind = cfg_.decoder.kind;
    if (has_param(p + ".deconv1.weight")) {
      d.deconv1_w = get(p + ".deconv1.weight");
      d.bn1_g = get(p + ".bn1.weight");
      d.bn1_b = get(p + ".bn1.bias");
      d.bn1_mean = buf(p + ".bn1.running_mean");
      d.bn1_var = buf(p + ".bn1.running_var");
    }
    if (has_param(p + ".deconv2.weight")) {
      d.deconv2_w = get(p + ".deconv2.weight");
      d.bn2_g = get(p + ".bn2.weight");
      d.bn2_b = get(p + ".bn2.bias");
      d.bn2_mean = buf(p + ".bn2.running_mean");
      d.bn2_var = buf(p + ".bn2.running_var");
    }
    d.conv_w = get(p + ".final.weight");
    d.conv_b = get(p + ".final.bias");
    heads_.push_back(std::move(d));
  }
}

void PoseModel::load_state(const std::vector<NamedTensor>& params, const std::vector<NamedTensor>& buffers) {
  for (const auto& p : params) mutable_param(p.name).assign(p.tensor);
  for (const auto& b : buffers) {
    auto it = buffer_index_.find(b.name);
    if (it == buffer_index_.end()) throw std::out_of_range("no buffer named " + b.name);
    buffers_[it->second].tensor.assign(b.tensor);
  }
}

Tensor PoseModel::encode(const Tensor& images, std::size_t task, const RunOptions& opt) const {
  const auto& b = cfg_.backbone;
  if (task >= cfg_.num_tasks()) throw std::out_of_range("task index " + std::to_string(task) + " out of range");
  if (images.rank() != 4 || images.dim(1) != 3) throw DimensionError("images must be [N,3,H,W], got " + shape_str(images.shape()));
  FlopScope scope("backbone");
  Tensor x = patch_embed(images, param("backbone.patch_embed.weight"), param("backbone.patch_embed.bias"),
                         param("backbone.pos_embed"), b, opt.mask_token, opt.mask);
  const std::size_t n = x.dim(0), t = x.dim(1), c = x.dim(2);
  const std::size_t gh = images.dim(2) / b.stride, gw = images.dim(3) / b.stride;
  const bool window = is_window_mode(b.attention_mode);
  if (opt.knowledge_token.defined()) {
    if (window) throw std::invalid_argument("the knowledge token requires full attention");
    if (opt.knowledge_token.numel() != c) {
      throw DimensionError("knowledge token has " + std::to_string(opt.knowledge_token.numel()) + " values, model dim is " +
                           std::to_string(c));
    }
    Tensor tok = ops::broadcast_to(ops::reshape(opt.knowledge_token, {1, 1, c}), {n, 1, c});
    x = ops::concat({x, tok}, 1);
  }
  {
    FlopScope blocks("blocks");
    for (std::size_t i = 0; i < b.depth; ++i) {
      FlopScope s(std::to_string(i));
      BlockContext ctx;
      ctx.heads = b.heads;
      ctx.window = window;
      ctx.window_spec = {b.window_size[0], b.window_size[1], uses_shift(b.attention_mode) && i % 2 == 1,
                         uses_pool(b.attention_mode)};
      ctx.grid_h = gh;
      ctx.grid_w = gw;
      ctx.activation = b.activation;
      ctx.drop_path_rate = b.drop_path_rate;
      ctx.training = opt.training;
      ctx.rng = opt.rng;
      ctx.task = task;
      x = transformer_block(x, blocks_[i], ctx);
    }
  }
  x = ops::layer_norm(x, param("backbone.norm.weight"), param("backbone.norm.bias"));
  if (opt.knowledge_token.defined()) x = ops::slice(x, 1, 0, t);
  return x;
}

Tensor PoseModel::to_grid(const Tensor& tokens, std::size_t gh, std::size_t gw) const {
  const std::size_t n = tokens.dim(0), c = tokens.dim(2);
  if (tokens.dim(1) != gh * gw) throw DimensionError("token count does not match the feature grid");
  return ops::permute(ops::reshape(tokens, {n, gh, gw, c}), {0, 3, 1, 2});
}

DecoderOutput PoseModel::decode_head(const Tensor& features, std::size_t task, bool training) const {
  FlopScope a("decoders");
  FlopScope b(cfg_.tasks.at(task).name);
  return decode(features, heads_.at(task), cfg_.tasks[task].num_keypoints, training);
}

DecoderOutput PoseModel::forward(const Tensor& images, std::size_t task, const RunOptions& opt) const {
  Tensor tokens = encode(images, task, opt);
  const std::size_t s = cfg_.backbone.stride;
  return decode_head(to_grid(tokens, images.dim(2) / s, images.dim(3) / s), task, opt.training);
}

std::string parameter_digest(const PoseModel& model) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : model.parameters()) {
    mix(p.name.data(), p.name.size());
    mix(p.tensor.data(), p.tensor.numel() * sizeof(double));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

PoseModel merge_for_inference(const PoseModel& model, std::size_t task) {
  const ModelConfig& src = model.config();
  if (src.moe.mode != FfnMode::ps_ffn) throw std::invalid_argument("merge_for_inference requires a ps_ffn model");
  if (task >= src.num_tasks()) throw std::out_of_range("task index " + std::to_string(task) + " out of range");
  ModelConfig cfg = src;
  cfg.moe.mode = FfnMode::plain;
  cfg.tasks = {src.tasks[task]};
  PoseModel merged(cfg, 0);
  std::vector<NamedTensor> params;
  for (const auto& p : merged.parameters()) {
    const auto pos = p.name.find(".ffn.");
    if (pos == std::string::npos) {
      params.push_back({p.name, model.param(p.name)});
      continue;
    }
    const std::size_t block = std::stoul(p.name.substr(std::string("backbone.blocks.").size()));
    const FfnWeights f = merge_ps_ffn(model.block(block).ffn, task);
    const std::string leaf = p.name.substr(pos + 5);
    const Tensor& v = leaf == "fc1.weight" ? f.fc1_w : leaf == "fc1.bias" ? f.fc1_b : leaf == "fc2.weight" ? f.fc2_w : f.fc2_b;
    params.push_back({p.name, v});
  }
  std::vector<NamedTensor> buffers;
  for (const auto& b : merged.buffers()) {
    auto it = std::find_if(model.buffers().begin(), model.buffers().end(), [&](const NamedTensor& s) { return s.name == b.name; });
    buffers.push_back({b.name, it->tensor});
  }
  merged.load_state(params, buffers);
  for (const auto& p : merged.parameters()) {
    std::string src_name = p.name;
    const auto pos = src_name.find(".ffn.fc2.");
    if (pos != std::string::npos) src_name.replace(pos, 9, ".ffn.fc2_shared.");
    merged.set_trainable(p.name, model.trainable(src_name));
  }
  return merged;
}

// ---- analytic FLOPs ----------------------------------------------------------

std::map<std::string, std::uint64_t> analytic_flops(const ModelConfig& cfg, std::size_t height, std::size_t width,
                                                    std::size_t batch, std::size_t task, bool knowledge_token) {
  validate(cfg);
  using U = std::uint64_t;
  std::map<std::string, U> m;
  const auto& b = cfg.backbone;
  const U n = batch, c = b.dim, hid = b.hidden(), heads = b.heads, dh = c / heads, p = b.patch_size;
  if (height % b.stride || width % b.stride) throw DimensionError("input not divisible by stride");
  const U gh = height / b.stride, gw = width / b.stride, t = gh * gw;
  m["backbone.patch_embed"] += n * c * (3 * p * p) * t;
  const bool window = is_window_mode(b.attention_mode);
  const U tt = t + (knowledge_token ? 1 : 0);
  for (std::size_t i = 0; i < b.depth; ++i) {
    const std::string pre = "backbone.blocks." + std::to_string(i) + ".";
    if (window) {
      const U wh = b.window_size[0], ww = b.window_size[1];
      const U hp = (gh + wh - 1) / wh * wh, wp = (gw + ww - 1) / ww * ww;
      const U nwin = (hp / wh) * (wp / ww), l = wh * ww;
      const U lk = l + (uses_pool(b.attention_mode) ? nwin : 0);
      const U rows = n * nwin;
      m[pre + "attn.qkv"] += rows * l * c * 3 * c;
      m[pre + "attn.scores"] += rows * heads * l * dh * lk;
      m[pre + "attn.context"] += rows * heads * l * lk * dh;
      m[pre + "attn.proj"] += rows * l * c * c;
    } else {
      m[pre + "attn.qkv"] += n * tt * c * 3 * c;
      m[pre + "attn.scores"] += n * heads * tt * dh * tt;
      m[pre + "attn.context"] += n * heads * tt * tt * dh;
      m[pre + "attn.proj"] += n * tt * c * c;
    }
    const U r = n * tt;
    const std::string e = pre + "ffn.experts." + std::to_string(task) + ".";
    switch (cfg.moe.mode) {
      case FfnMode::plain:
        m[pre + "ffn.fc1"] += r * c * hid;
        m[pre + "ffn.fc2"] += r * hid * c;
        break;
      case FfnMode::is_ffn:
        m[pre + "ffn.shared.fc1"] += r * c * hid;
        m[pre + "ffn.shared.fc2"] += r * hid * c;
        [[fallthrough]];
      case FfnMode::i_ffn:
        m[e + "fc1"] += r * c * hid;
        m[e + "fc2"] += r * hid * c;
        break;
      case FfnMode::ps_ffn: {
        const U a = cfg.task_channels();
        m[pre + "ffn.fc1"] += r * c * hid;
        m[pre + "ffn.fc2_shared"] += r * hid * (c - a);
        m[pre + "ffn.fc2_task"] += r * hid * a;
        break;
      }
    }
  }
  const std::string d = "decoders." + cfg.tasks.at(task).name + ".";
  const U dc = cfg.decoder.deconv_channels;
  const U oc = head_out_channels(cfg, task);
  switch (cfg.decoder.kind) {
    case DecoderKind::classic:
    case DecoderKind::classic_fp:
      m[d + "deconv1"] += n * c * (dc * 16) * (gh * gw);
      m[d + "deconv2"] += n * dc * (dc * 16) * (4 * gh * gw);
      m[d + "final"] += n * oc * dc * (16 * gh * gw);
      break;
    case DecoderKind::simple:
      m[d + "final"] += n * oc * (c * 9) * (16 * gh * gw);
      break;
    case DecoderKind::minimal:
      m[d + "final"] += n * oc * c * (gh * gw);
      break;
    case DecoderKind::bottom_up_ae:
      m[d + "deconv1"] += n * c * (dc * 16) * (gh * gw);
      m[d + "final"] += n * oc * dc * (4 * gh * gw);
      break;
  }
  return m;
}

std::uint64_t sum_with_prefix(const std::map<std::string, std::uint64_t>& flops, const std::string& prefix) {
  std::uint64_t s = 0;
  for (const auto& [k, v] : flops) {
    if (k.compare(0, prefix.size(), prefix) == 0) s += v;
  }
  return s;
}

}  // namespace vitpose
