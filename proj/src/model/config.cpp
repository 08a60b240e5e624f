#include "vitpose/config.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <stdexcept>

namespace vitpose {

using nlohmann::json;

NLOHMANN_JSON_SERIALIZE_ENUM(AttentionMode, {{AttentionMode::full, "full"},
                                             {AttentionMode::window, "window"},
                                             {AttentionMode::window_shift, "window_shift"},
                                             {AttentionMode::window_pool, "window_pool"},
                                             {AttentionMode::window_shift_pool, "window_shift_pool"}})
NLOHMANN_JSON_SERIALIZE_ENUM(FfnMode, {{FfnMode::plain, "plain"},
                                       {FfnMode::i_ffn, "i_ffn"},
                                       {FfnMode::is_ffn, "is_ffn"},
                                       {FfnMode::ps_ffn, "ps_ffn"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DecoderKind, {{DecoderKind::classic, "classic"},
                                           {DecoderKind::classic_fp, "classic_fp"},
                                           {DecoderKind::simple, "simple"},
                                           {DecoderKind::minimal, "minimal"},
                                           {DecoderKind::bottom_up_ae, "bottom_up_ae"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::gelu, "gelu"}, {Activation::relu, "relu"}})

bool is_window_mode(AttentionMode m) { return m != AttentionMode::full; }
bool uses_shift(AttentionMode m) { return m == AttentionMode::window_shift || m == AttentionMode::window_shift_pool; }
bool uses_pool(AttentionMode m) { return m == AttentionMode::window_pool || m == AttentionMode::window_shift_pool; }

namespace {

bool integral(double v) { return std::abs(v - std::round(v)) < 1e-9; }

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// Enum values arrive as strings; the serializer silently maps unknown names to the
// first enumerator, so check them explicitly.
template <typename E>
E parse_enum(const json& v, const char* key, std::initializer_list<const char*> names) {
  const auto s = v.get<std::string>();
  for (const char* n : names) {
    if (s == n) return json(s).get<E>();
  }
  fail(std::string("unknown value '") + s + "' for " + key);
  return E{};
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) fail(std::string(where) + ": expected a JSON object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) fail(std::string(where) + ": unknown key '" + k + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::size_t BackboneConfig::hidden() const { return static_cast<std::size_t>(std::llround(mlp_ratio * dim)); }

std::size_t ModelConfig::task_channels() const {
  return static_cast<std::size_t>(std::llround(moe.partition_ratio * static_cast<double>(backbone.dim)));
}

std::size_t ModelConfig::task_index(const std::string& name) const {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].name == name) return i;
  }
  throw std::invalid_argument("unknown task '" + name + "'");
}

BackboneConfig backbone_preset(const std::string& name) {
  BackboneConfig c;
  c.name = name;
  if (name == "tiny_desk") {
    c.depth = 2, c.dim = 32, c.heads = 2, c.patch_size = 4, c.stride = 4;
    c.input_hw = {32, 24};
    c.window_size = {4, 3};
    return c;
  }
  c.patch_size = 16, c.stride = 16;
  c.input_hw = {256, 192};
  if (name == "vit_s") {
    c.depth = 12, c.dim = 384, c.heads = 6, c.drop_path_rate = 0.1;
  } else if (name == "vit_b") {
    c.depth = 12, c.dim = 768, c.heads = 12, c.drop_path_rate = 0.3;
  } else if (name == "vit_l") {
    c.depth = 24, c.dim = 1024, c.heads = 16, c.drop_path_rate = 0.5;
  } else if (name == "vit_h") {
    c.depth = 32, c.dim = 1280, c.heads = 16, c.drop_path_rate = 0.55;
  } else {
    fail("unknown backbone '" + name + "' (expected vit_s, vit_b, vit_l, vit_h or tiny_desk)");
  }
  return c;
}

void validate(const ModelConfig& cfg) {
  const auto& b = cfg.backbone;
  if (b.depth == 0 || b.dim == 0 || b.heads == 0) fail("depth, dim and heads must be positive");
  if (b.dim % b.heads != 0) fail("dim " + std::to_string(b.dim) + " not divisible by heads " + std::to_string(b.heads));
  if (b.patch_size == 0 || !(b.stride == b.patch_size || 2 * b.stride == b.patch_size)) {
    fail("stride must equal patch_size or patch_size/2");
  }
  if (b.input_hw[0] % b.stride != 0 || b.input_hw[1] % b.stride != 0) {
    fail("input " + std::to_string(b.input_hw[0]) + "x" + std::to_string(b.input_hw[1]) + " not divisible by stride " +
         std::to_string(b.stride));
  }
  if (!(b.drop_path_rate >= 0.0 && b.drop_path_rate < 1.0)) fail("drop_path_rate must lie in [0, 1)");
  if (!(b.mlp_ratio > 0.0) || !integral(b.mlp_ratio * static_cast<double>(b.dim))) fail("mlp_ratio * dim must be integral");
  if (b.window_size[0] == 0 || b.window_size[1] == 0) fail("window_size must be positive");
  if (cfg.tasks.empty()) fail("at least one task is required");
  std::set<std::string> names;
  for (const auto& t : cfg.tasks) {
    if (t.num_keypoints == 0) fail("task '" + t.name + "' has no keypoints");
    if (!names.insert(t.name).second) fail("duplicate task name '" + t.name + "'");
  }
  if (cfg.moe.mode == FfnMode::ps_ffn) {
    const double a = cfg.moe.partition_ratio;
    if (!(a > 0.0 && a < 1.0)) fail("partition_ratio must lie in (0, 1)");
    if (!integral(a * static_cast<double>(b.dim))) {
      fail("partition_ratio * dim = " + std::to_string(a * static_cast<double>(b.dim)) + " is not an integer");
    }
  }
  if (cfg.decoder.deconv_channels == 0 || cfg.decoder.tag_dim == 0) fail("decoder widths must be positive");
}

TrainConfig train_preset(const std::string& backbone, bool multi_task, std::size_t batch_size) {
  static const std::map<std::string, double> layer_decay{
      {"vit_s", 0.80}, {"vit_b", 0.75}, {"vit_l", 0.80}, {"vit_h", 0.80}};
  const auto it = layer_decay.find(backbone);
  if (it == layer_decay.end()) fail("no training preset for backbone '" + backbone + "'");
  TrainConfig t;
  const std::size_t reference = multi_task ? 1024 : 512;
  t.base_lr = multi_task ? 1e-3 : 5e-4;
  t.weight_decay = 0.1;
  t.layer_wise_decay = it->second;
  t.batch_size = reference;
  if (batch_size > 0) {
    t.base_lr *= static_cast<double>(batch_size) / static_cast<double>(reference);
    t.batch_size = batch_size;
  }
  return t;
}

void validate(const TrainConfig& cfg) {
  if (!(cfg.layer_wise_decay > 0.0 && cfg.layer_wise_decay <= 1.0)) fail("layer_wise_decay must lie in (0, 1]");
  for (std::size_t i = 0; i < cfg.lr_drop_epochs.size(); ++i) {
    if (cfg.lr_drop_epochs[i] >= cfg.epochs) fail("lr_drop_epochs must be < epochs");
    if (i > 0 && cfg.lr_drop_epochs[i] <= cfg.lr_drop_epochs[i - 1]) fail("lr_drop_epochs must be strictly ascending");
  }
  if (cfg.batch_size == 0) fail("batch_size must be positive");
}

// ---- JSON -----------------------------------------------------------------

void to_json(json& j, const BackboneConfig& c) {
  j = json{{"name", c.name},
           {"depth", c.depth},
           {"dim", c.dim},
           {"heads", c.heads},
           {"patch_size", c.patch_size},
           {"stride", c.stride},
           {"mlp_ratio", c.mlp_ratio},
           {"attention_mode", c.attention_mode},
           {"window_size", c.window_size},
           {"drop_path_rate", c.drop_path_rate},
           {"input_hw", c.input_hw},
           {"rel_pos_bias", c.rel_pos_bias},
           {"activation", c.activation}};
}

void from_json(const json& j, BackboneConfig& c) {
  reject_unknown(j,
                 {"name", "depth", "dim", "heads", "patch_size", "stride", "mlp_ratio", "attention_mode", "window_size",
                  "drop_path_rate", "input_hw", "rel_pos_bias", "activation"},
                 "backbone");
  // A name selects the preset; explicit fields then override it.
  if (j.contains("name")) c = backbone_preset(j.at("name").get<std::string>());
  read(j, "depth", c.depth);
  read(j, "dim", c.dim);
  read(j, "heads", c.heads);
  read(j, "patch_size", c.patch_size);
  read(j, "stride", c.stride);
  read(j, "mlp_ratio", c.mlp_ratio);
  if (j.contains("attention_mode")) {
    c.attention_mode = parse_enum<AttentionMode>(j.at("attention_mode"), "attention_mode",
                                                 {"full", "window", "window_shift", "window_pool", "window_shift_pool"});
  }
  read(j, "window_size", c.window_size);
  read(j, "drop_path_rate", c.drop_path_rate);
  read(j, "input_hw", c.input_hw);
  read(j, "rel_pos_bias", c.rel_pos_bias);
  if (j.contains("activation")) c.activation = parse_enum<Activation>(j.at("activation"), "activation", {"gelu", "relu"});
}

void to_json(json& j, const MoEConfig& c) { j = json{{"mode", c.mode}, {"partition_ratio", c.partition_ratio}}; }

void from_json(const json& j, MoEConfig& c) {
  reject_unknown(j, {"mode", "partition_ratio"}, "moe");
  if (j.contains("mode")) c.mode = parse_enum<FfnMode>(j.at("mode"), "moe.mode", {"plain", "i_ffn", "is_ffn", "ps_ffn"});
  read(j, "partition_ratio", c.partition_ratio);
}

void to_json(json& j, const DecoderConfig& c) {
  j = json{{"kind", c.kind}, {"deconv_channels", c.deconv_channels}, {"tag_dim", c.tag_dim}};
}

void from_json(const json& j, DecoderConfig& c) {
  reject_unknown(j, {"kind", "deconv_channels", "tag_dim"}, "decoder");
  if (j.contains("kind")) {
    c.kind = parse_enum<DecoderKind>(j.at("kind"), "decoder.kind",
                                     {"classic", "classic_fp", "simple", "minimal", "bottom_up_ae"});
  }
  read(j, "deconv_channels", c.deconv_channels);
  read(j, "tag_dim", c.tag_dim);
}

void to_json(json& j, const TaskSpec& c) { j = json{{"name", c.name}, {"num_keypoints", c.num_keypoints}}; }

void from_json(const json& j, TaskSpec& c) {
  reject_unknown(j, {"name", "num_keypoints"}, "task");
  read(j, "name", c.name);
  read(j, "num_keypoints", c.num_keypoints);
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"backbone", c.backbone}, {"moe", c.moe}, {"decoder", c.decoder}, {"tasks", c.tasks}};
}

void from_json(const json& j, ModelConfig& c) {
  reject_unknown(j, {"backbone", "moe", "decoder", "tasks"}, "model");
  read(j, "backbone", c.backbone);
  read(j, "moe", c.moe);
  read(j, "decoder", c.decoder);
  read(j, "tasks", c.tasks);
}

void to_json(json& j, const FreezeMask& c) {
  j = json{{"freeze_mhsa", c.freeze_mhsa}, {"freeze_ffn", c.freeze_ffn}, {"freeze_patch_embed", c.freeze_patch_embed}};
}

void from_json(const json& j, FreezeMask& c) {
  reject_unknown(j, {"freeze_mhsa", "freeze_ffn", "freeze_patch_embed"}, "freeze");
  read(j, "freeze_mhsa", c.freeze_mhsa);
  read(j, "freeze_ffn", c.freeze_ffn);
  read(j, "freeze_patch_embed", c.freeze_patch_embed);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"base_lr", c.base_lr},
           {"weight_decay", c.weight_decay},
           {"layer_wise_decay", c.layer_wise_decay},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"lr_drop_epochs", c.lr_drop_epochs},
           {"lr_drop_factor", c.lr_drop_factor},
           {"warmup_iters", c.warmup_iters},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"max_steps", c.max_steps},
           {"checkpoint_every", c.checkpoint_every},
           {"sigma", c.sigma},
           {"target_error_px", c.target_error_px},
           {"eval_every", c.eval_every},
           {"freeze", c.freeze},
           {"round_params_to_float", c.round_params_to_float}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"base_lr", "weight_decay", "layer_wise_decay", "batch_size", "epochs", "lr_drop_epochs",
                  "lr_drop_factor", "warmup_iters", "beta1", "beta2", "adam_eps", "max_steps", "checkpoint_every",
                  "sigma", "target_error_px", "eval_every", "freeze", "round_params_to_float"},
                 "train");
  read(j, "base_lr", c.base_lr);
  read(j, "weight_decay", c.weight_decay);
  read(j, "layer_wise_decay", c.layer_wise_decay);
  read(j, "batch_size", c.batch_size);
  read(j, "epochs", c.epochs);
  read(j, "lr_drop_epochs", c.lr_drop_epochs);
  read(j, "lr_drop_factor", c.lr_drop_factor);
  read(j, "warmup_iters", c.warmup_iters);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "max_steps", c.max_steps);
  read(j, "checkpoint_every", c.checkpoint_every);
  read(j, "sigma", c.sigma);
  read(j, "target_error_px", c.target_error_px);
  read(j, "eval_every", c.eval_every);
  read(j, "freeze", c.freeze);
  read(j, "round_params_to_float", c.round_params_to_float);
}

void to_json(json& j, const DataConfig& c) {
  j = json{{"source", c.source},         {"num_images", c.num_images}, {"min_persons", c.min_persons},
           {"max_persons", c.max_persons}, {"annotations", c.annotations}, {"image_root", c.image_root},
           {"dataset_spec", c.dataset_spec}, {"augment", c.augment},   {"data_seed", c.data_seed}};
}

void from_json(const json& j, DataConfig& c) {
  reject_unknown(j,
                 {"source", "num_images", "min_persons", "max_persons", "annotations", "image_root", "dataset_spec",
                  "augment", "data_seed"},
                 "data");
  read(j, "source", c.source);
  read(j, "num_images", c.num_images);
  read(j, "min_persons", c.min_persons);
  read(j, "max_persons", c.max_persons);
  read(j, "annotations", c.annotations);
  read(j, "image_root", c.image_root);
  read(j, "dataset_spec", c.dataset_spec);
  read(j, "augment", c.augment);
  read(j, "data_seed", c.data_seed);
}

void to_json(json& j, const ExperimentConfig& c) { j = json{{"model", c.model}, {"train", c.train}, {"data", c.data}}; }

void from_json(const json& j, ExperimentConfig& c) {
  reject_unknown(j, {"model", "train", "data"}, "config");
  read(j, "model", c.model);
  read(j, "train", c.train);
  read(j, "data", c.data);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail("override '" + assignment + "' is not of the form key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) fail("unknown override key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  *node = value;
}

std::string config_digest(const json& doc) {
  const std::string s = doc.dump();  // object keys are kept sorted by nlohmann::json
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vitpose
