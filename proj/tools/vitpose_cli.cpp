// Command-line driver: training, pretraining, evaluation, distillation, merging,
// model statistics, synthetic data and heatmap dumps.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vitpose/codec.hpp"
#include "vitpose/config.hpp"
#include "vitpose/data.hpp"
#include "vitpose/metrics.hpp"
#include "vitpose/model.hpp"
#include "vitpose/ops.hpp"
#include "vitpose/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vitpose;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string out = ".";
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  bool preset = false;
};

void add_preset_flag(CLI::App* app, Common& c) {
  app->add_flag("--preset", c.preset,
                "use the published optimiser settings for the backbone, lr scaled linearly to train.batch_size; "
                "explicit overrides still win");
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--override", c.overrides, "dotted key=value applied after the config, repeatable");
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_trace(const fs::path& path, const std::string& header, const std::vector<std::pair<std::size_t, double>>& rows) {
  std::string text = header + "\n";
  for (const auto& [k, v] : rows) text += std::to_string(k) + "," + format_double(v) + "\n";
  write_text(path, text);
}

std::vector<std::pair<std::size_t, double>> indexed(const std::vector<double>& v) {
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back({i, v[i]});
  return out;
}

// Keys may omit their section ("moe.partition_ratio"); the unique section holding the
// first segment is prepended. Setting backbone.name reloads that preset.
void apply_cli_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + assignment + "' is not of the form key=value");
  std::string path = assignment.substr(0, eq);
  const std::string head = path.substr(0, path.find('.'));
  if (!doc.contains(head)) {
    std::vector<std::string> hits;
    for (const char* section : {"model", "train", "data"}) {
      if (doc[section].contains(head)) hits.push_back(section);
    }
    if (hits.size() == 1) path = hits[0] + "." + path;
  }
  const std::string value = assignment.substr(eq + 1);
  try {
    if (path == "model.backbone.name") {
      doc["model"]["backbone"] = backbone_preset(value);
      return;
    }
    apply_override(doc, path + "=" + value);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

struct Resolved {
  ExperimentConfig cfg;
  json doc;
  std::string digest;
};

Resolved resolve(const Common& c) {
  Resolved r;
  try {
    if (!c.config.empty()) r.cfg = read_json(c.config).get<ExperimentConfig>();
    r.doc = r.cfg;
    for (const auto& o : c.overrides) apply_cli_override(r.doc, o);
    r.cfg = r.doc.get<ExperimentConfig>();
    if (c.preset) {
      const TrainConfig t = train_preset(r.cfg.model.backbone.name, r.cfg.model.num_tasks() > 1, r.cfg.train.batch_size);
      r.doc["train"]["base_lr"] = t.base_lr;
      r.doc["train"]["weight_decay"] = t.weight_decay;
      r.doc["train"]["layer_wise_decay"] = t.layer_wise_decay;
      for (const auto& o : c.overrides) apply_cli_override(r.doc, o);
      r.cfg = r.doc.get<ExperimentConfig>();
    }
    validate(r.cfg.model);
    validate(r.cfg.train);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("config: ") + e.what());
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  r.doc = r.cfg;
  r.digest = config_digest(r.doc);
  return r;
}

json report_header(const std::string& command, const Resolved& r, std::uint64_t seed) {
  return {{"command", command}, {"config_digest", r.digest}, {"seed", seed}};
}

bool bottom_up(const ModelConfig& m) { return m.decoder.kind == DecoderKind::bottom_up_ae; }

// One dataset per task for synthetic data; a COCO-format source feeds task 0.
std::vector<SynthDataset> load_data(const ExperimentConfig& e) {
  const DataConfig& d = e.data;
  if (bottom_up(e.model) && e.model.num_tasks() != 1) throw UsageError("bottom-up training takes a single task");
  std::vector<SynthDataset> out;
  if (d.source == "synth") {
    for (std::size_t t = 0; t < e.model.num_tasks(); ++t) {
      SynthOptions o;
      o.num_images = d.num_images;
      o.min_persons = d.min_persons;
      o.max_persons = d.max_persons;
      o.num_keypoints = e.model.tasks[t].num_keypoints;
      o.seed = d.data_seed + t;
      if (bottom_up(e.model)) o.height = e.model.backbone.input_hw[0], o.width = e.model.backbone.input_hw[1];
      SynthDataset s = synth_generate(o);
      s.spec.name = e.model.tasks[t].name;
      s.spec.task_id = t;
      for (auto& inst : s.annotations.instances) inst.task = t;
      out.push_back(std::move(s));
    }
    return out;
  }
  if (d.source != "coco") throw UsageError("data.source must be synth or coco, got " + d.source);
  SynthDataset s;
  s.spec = d.dataset_spec.empty() ? coco_person_spec() : load_dataset_spec(d.dataset_spec);
  const std::string ann = d.annotations.empty() ? s.spec.annotations : d.annotations;
  const std::string root = d.image_root.empty() ? s.spec.image_root : d.image_root;
  if (ann.empty()) throw UsageError("data.annotations is required for coco data");
  s.annotations = load_coco_json(ann, s.spec);
  for (const auto& img : s.annotations.images) s.images.push_back(read_image((fs::path(root) / img.file_name).string()));
  out.push_back(std::move(s));
  return out;
}

std::vector<CropSample> crops_for(const ExperimentConfig& e, const std::vector<SynthDataset>& data, std::uint64_t seed) {
  Augment aug;
  if (e.data.augment) aug = Augment{true, 40.0, 0.3};
  std::vector<CropSample> out;
  for (std::size_t t = 0; t < data.size(); ++t) {
    auto c = make_crops(data[t], e.model.backbone.input_hw[0], e.model.backbone.input_hw[1], aug, seed + t);
    out.insert(out.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
  }
  return out;
}

PoseModel make_model(const ExperimentConfig& e, std::uint64_t seed, const std::string& init) {
  PoseModel m = init.empty() ? PoseModel(e.model, seed) : load_checkpoint(init).model;
  m.apply_freeze(e.train.freeze);
  return m;
}

std::size_t task_by_name(const ModelConfig& m, const std::string& task) {
  if (!task.empty() && std::all_of(task.begin(), task.end(), ::isdigit)) {
    const std::size_t i = std::stoul(task);
    if (i >= m.num_tasks()) throw UsageError("task index " + task + " out of range");
    return i;
  }
  try {
    return m.task_index(task);
  } catch (const std::exception&) {
    throw UsageError("unknown task '" + task + "'");
  }
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string init;
  std::size_t ae_pull_radius = 1;
};

int cmd_train(const TrainArgs& a) {
  const Resolved r = resolve(a.common);
  const fs::path out(a.common.out);
  fs::create_directories(out / "checkpoints");
  const auto data = load_data(r.cfg);
  PoseModel model = make_model(r.cfg, a.common.seed, a.init);
  const bool bu = bottom_up(model.config());
  const auto crops = bu ? std::vector<CropSample>{} : crops_for(r.cfg, data, a.common.seed);
  TrainOptions opt;
  opt.seed = a.common.seed;
  opt.checkpoint_dir = (out / "checkpoints").string();
  opt.checkpoint_extra = {{"config_digest", r.digest}, {"seed", a.common.seed}};
  opt.ae_pull_radius = a.ae_pull_radius;
  const TrainRun run = bu ? train_bottom_up(model, make_bottom_up(data.at(0)), r.cfg.train, opt)
                          : train(model, crops, r.cfg.train, opt);
  write_json(out / "config.json", r.doc);
  write_trace(out / "loss_trace.csv", "step,loss", indexed(run.loss_trace));
  if (!run.error_trace.empty()) write_trace(out / "error_trace.csv", "step,error_px", run.error_trace);
  json rep = report_header("train", r, a.common.seed);
  rep["steps"] = run.steps;
  rep["initial_loss"] = run.loss_trace.empty() ? 0.0 : run.loss_trace.front();
  rep["final_loss"] = run.loss_trace.empty() ? 0.0 : run.loss_trace.back();
  if (!bu) rep["final_error_px"] = mean_keypoint_error(model, crops);
  rep["checkpoints"] = run.checkpoints;
  rep["parameter_digest"] = parameter_digest(model);
  write_json(out / "train_report.json", rep);
  std::cout << rep.dump(2) << "\n";
  return 0;
}

// ---- pretrain ---------------------------------------------------------------

struct PretrainArgs {
  Common common;
  MimOptions mim;
};

int cmd_pretrain(PretrainArgs a) {
  const Resolved r = resolve(a.common);
  const fs::path out(a.common.out);
  const auto data = load_data(r.cfg);
  std::vector<Tensor> images;
  if (bottom_up(r.cfg.model)) {
    for (auto& s : make_bottom_up(data.at(0))) images.push_back(s.image);
  } else {
    for (auto& s : crops_for(r.cfg, data, a.common.seed)) images.push_back(s.image);
  }
  PoseModel model(r.cfg.model, a.common.seed);
  a.mim.seed = a.common.seed;
  const MimResult res = pretrain_mim(model, images, a.mim);
  fs::create_directories(out);
  save_checkpoint(model, (out / "pretrained.vpck").string(),
                  {res.loss_trace.size(), a.common.seed, 0, {{"config_digest", r.digest}, {"stage", "pretrain"}}});
  write_trace(out / "mim_trace.csv", "step,loss", indexed(res.loss_trace));
  json rep = report_header("pretrain", r, a.common.seed);
  rep["steps"] = res.loss_trace.size();
  rep["mask_ratio"] = a.mim.mask_ratio;
  rep["initial_loss"] = res.loss_trace.front();
  rep["final_loss"] = res.loss_trace.back();
  rep["checkpoint"] = (out / "pretrained.vpck").string();
  write_json(out / "pretrain_report.json", rep);
  std::cout << rep.dump(2) << "\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string annotations, predictions, checkpoint, spec, task = "0";
  std::size_t max_dets = 20;
};

std::vector<GtInstance> to_gts(const CocoDataset& d) {
  std::vector<GtInstance> out;
  for (const auto& p : d.instances) out.push_back({p.image_id, p.keypoints, p.area, p.crowd});
  return out;
}

std::vector<Prediction> read_predictions(const std::string& path, const DatasetSpec& spec) {
  const json doc = read_json(path);
  std::vector<Prediction> out;
  if (doc.is_object()) {  // an annotation file: every instance is a prediction with score 1
    for (const auto& p : parse_coco_json(doc.dump(), spec).instances) out.push_back({p.image_id, p.keypoints, 1.0});
    return out;
  }
  if (!doc.is_array()) throw UsageError(path + ": expected a result list or an annotation file");
  for (const auto& r : doc) {
    const auto flat = r.at("keypoints").get<std::vector<double>>();
    if (flat.size() != 3 * spec.num_keypoints) {
      throw UsageError(path + ": result has " + std::to_string(flat.size() / 3) + " keypoints, expected " +
                       std::to_string(spec.num_keypoints));
    }
    Prediction p;
    p.image_id = r.at("image_id").get<std::int64_t>();
    p.score = r.value("score", 1.0);
    for (std::size_t k = 0; k < spec.num_keypoints; ++k) {
      p.keypoints.push_back({flat[3 * k], flat[3 * k + 1], flat[3 * k + 2] > 0 ? 2 : 0, 0.0});
    }
    out.push_back(std::move(p));
  }
  return out;
}

// Top-down predictions for every annotated instance, mapped back to image pixels.
std::vector<Prediction> predict(const PoseModel& model, const SynthDataset& data) {
  const auto& b = model.config().backbone;
  const auto crops = make_crops(data, b.input_hw[0], b.input_hw[1]);
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < crops.size(); ++i) {
    const Tensor hm = model.forward(ops::reshape(crops[i].image, {1, 3, b.input_hw[0], b.input_hw[1]}), crops[i].task).heatmaps;
    const double fy = static_cast<double>(hm.dim(2)) / b.input_hw[0], fx = static_cast<double>(hm.dim(3)) / b.input_hw[1];
    Prediction p;
    p.image_id = data.annotations.instances[i].image_id;
    double score = 0;
    const Pose decoded = decode_batch(hm).at(0);
    for (const Keypoint& k : decoded) {
      const auto xy = crops[i].transform.invert((k.x + 0.5) / fx - 0.5, (k.y + 0.5) / fy - 0.5);
      p.keypoints.push_back({xy[0], xy[1], 2, k.score});
      score += k.score;
    }
    p.score = score / static_cast<double>(p.keypoints.size());
    out.push_back(std::move(p));
  }
  return out;
}

json results_json(const std::vector<Prediction>& preds) {
  json out = json::array();
  for (const auto& p : preds) {
    std::vector<double> flat;
    for (const Keypoint& k : p.keypoints) flat.insert(flat.end(), {k.x, k.y, k.score});
    out.push_back({{"image_id", p.image_id}, {"category_id", 1}, {"keypoints", flat}, {"score", p.score}});
  }
  return out;
}

int cmd_eval(const EvalArgs& a) {
  const Resolved r = resolve(a.common);
  const fs::path out(a.common.out);
  CocoEvalOptions eo;
  eo.max_dets = a.max_dets;
  EvalReport rep;
  std::vector<double> sigmas;
  if (!a.checkpoint.empty()) {
    if (!a.predictions.empty()) throw UsageError("--checkpoint and --predictions are exclusive");
    const PoseModel model = load_checkpoint(a.checkpoint).model;
    if (bottom_up(model.config())) throw UsageError("eval runs top-down checkpoints");
    ExperimentConfig e = r.cfg;
    e.model = model.config();
    const auto all = load_data(e);
    const std::size_t task = task_by_name(model.config(), a.task);
    const SynthDataset& data = all.at(std::min(task, all.size() - 1));
    if (data.spec.task_id != task) throw UsageError("no data for task " + a.task);
    const auto preds = predict(model, data);
    sigmas = data.spec.sigmas;
    rep = evaluate_coco(preds, to_gts(data.annotations), sigmas, eo);
    const auto pf = report_params_flops(model.config(), model.config().backbone.input_hw[0], model.config().backbone.input_hw[1]);
    rep.params = pf.params;
    rep.gflops = pf.gflops;
    rep.flop_convention = pf.convention;
    fs::create_directories(out);
    write_json(out / "predictions.json", results_json(preds));
  } else {
    if (a.annotations.empty() || a.predictions.empty()) {
      throw UsageError("eval needs --annotations and --predictions, or --checkpoint");
    }
    const DatasetSpec spec = a.spec.empty() ? coco_person_spec() : load_dataset_spec(a.spec);
    sigmas = spec.sigmas;
    rep = evaluate_coco(read_predictions(a.predictions, spec), to_gts(load_coco_json(a.annotations, spec)), sigmas, eo);
  }
  json doc = report_header("eval", r, a.common.seed);
  doc.update(json(rep));
  write_json(out / "eval_report.json", doc);
  std::cout << doc.dump(2) << "\n";
  return 0;
}

// ---- distill ----------------------------------------------------------------

struct DistillArgs {
  Common common;
  std::string teacher;
  std::size_t token_steps = 200;
  bool output_distill = true;
};

int cmd_distill(const DistillArgs& a) {
  const Resolved r = resolve(a.common);
  const fs::path out(a.common.out);
  PoseModel teacher = load_checkpoint(a.teacher).model;
  if (bottom_up(teacher.config()) || bottom_up(r.cfg.model)) throw UsageError("distillation runs top-down models");
  if (teacher.config().backbone.dim != r.cfg.model.backbone.dim) {
    throw UsageError("the knowledge token needs equal embedding widths (teacher " +
                     std::to_string(teacher.config().backbone.dim) + ", student " +
                     std::to_string(r.cfg.model.backbone.dim) + ")");
  }
  if (teacher.config().backbone.input_hw != r.cfg.model.backbone.input_hw) throw UsageError("teacher and student inputs differ");
  const auto crops = crops_for(r.cfg, load_data(r.cfg), a.common.seed);
  const auto& b = r.cfg.model.backbone;
  const Tensor probe = teacher.forward(ops::reshape(crops.at(0).image, {1, 3, b.input_hw[0], b.input_hw[1]}), 0).heatmaps;
  const std::size_t hh = probe.dim(2), hw = probe.dim(3);
  std::vector<TokenBatch> batches;
  for (std::size_t s = 0; s < crops.size(); s += r.cfg.train.batch_size) {
    const std::size_t e = std::min(crops.size(), s + r.cfg.train.batch_size);
    Tensor images({e - s, 3, b.input_hw[0], b.input_hw[1]});
    std::vector<Pose> poses;
    for (std::size_t i = s; i < e; ++i) {
      std::copy(crops[i].image.values().begin(), crops[i].image.values().end(),
                images.data() + (i - s) * crops[i].image.numel());
      poses.push_back(to_heatmap_coords(crops[i].keypoints, b.input_hw[0], b.input_hw[1], hh, hw));
    }
    batches.push_back({images, encode_batch(poses, hh, hw, r.cfg.train.sigma).heatmaps});
  }
  TokenOptimOptions to;
  to.steps = a.token_steps;
  to.seed = a.common.seed;
  const TokenOptimResult tok = optimize_knowledge_token(teacher, batches, to);

  PoseModel student(r.cfg.model, a.common.seed);
  student.apply_freeze(r.cfg.train.freeze);
  TrainOptions opt;
  opt.seed = a.common.seed;
  opt.knowledge_token = tok.token.token;
  if (a.output_distill) opt.teacher = &teacher;
  const TrainRun run = train(student, crops, r.cfg.train, opt);

  fs::create_directories(out);
  save_checkpoint(student, (out / "student.vpck").string(),
                  {run.steps, a.common.seed, 0, {{"config_digest", r.digest}, {"teacher", tok.token.source_teacher}}});
  save_tensors({{"knowledge_token", tok.token.token}}, (out / "token.vpck").string(),
               {{"source_teacher", tok.token.source_teacher}});
  write_trace(out / "token_trace.csv", "step,loss", indexed(tok.loss_trace));
  write_trace(out / "loss_trace.csv", "step,loss", indexed(run.loss_trace));
  json rep = report_header("distill", r, a.common.seed);
  rep["teacher_digest"] = tok.token.source_teacher;
  rep["token_initial_loss"] = tok.loss_trace.front();
  rep["token_final_loss"] = tok.loss_trace.back();
  rep["output_distillation"] = a.output_distill;
  rep["steps"] = run.steps;
  rep["final_loss"] = run.loss_trace.empty() ? 0.0 : run.loss_trace.back();
  write_json(out / "distill_report.json", rep);
  std::cout << rep.dump(2) << "\n";
  return 0;
}

// ---- merge ------------------------------------------------------------------

struct MergeArgs {
  Common common;
  std::string checkpoint, task = "0";
};

int cmd_merge(const MergeArgs& a) {
  const Resolved r = resolve(a.common);
  const fs::path out(a.common.out);
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const std::size_t task = task_by_name(ck.model.config(), a.task);
  const PoseModel merged = merge_for_inference(ck.model, task);
  // Agreement on a fixed probe input.
  const auto& b = ck.model.config().backbone;
  Rng rng(a.common.seed);
  const Tensor x = rng.uniform_tensor({2, 3, b.input_hw[0], b.input_hw[1]}, 0.0, 1.0);
  const Tensor y0 = ck.model.forward(x, task).heatmaps, y1 = merged.forward(x, 0).heatmaps;
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < y0.numel(); ++i) {
    diff = std::max(diff, std::abs(y0.at(i) - y1.at(i)));
    scale = std::max(scale, std::abs(y0.at(i)));
  }
  const std::string name = ck.model.config().tasks[task].name;
  fs::create_directories(out);
  const fs::path file = out / ("merged_" + name + ".vpck");
  save_checkpoint(merged, file.string(), {ck.meta.step, ck.meta.rng_seed, ck.meta.rng_counter,
                                          {{"merged_from", parameter_digest(ck.model)}, {"task", name}}});
  json rep = report_header("merge", r, a.common.seed);
  rep["task"] = name;
  rep["params_before"] = ck.model.num_parameters();
  rep["params_after"] = merged.num_parameters();
  rep["max_abs_diff"] = diff;
  rep["max_rel_diff"] = scale > 0 ? diff / scale : diff;
  rep["checkpoint"] = file.string();
  write_json(out / "merge_report.json", rep);
  std::cout << rep.dump(2) << "\n";
  return 0;
}

// ---- stats ------------------------------------------------------------------

struct StatsArgs {
  Common common;
  std::string model, input = "256x192", decoder, attention, window, checkpoint;
  std::size_t stride = 0;
};

std::pair<std::size_t, std::size_t> parse_hw(const std::string& s, const char* what) {
  std::size_t h = 0, w = 0;
  char x = 0;
  std::istringstream in(s);
  if (!(in >> h >> x >> w) || x != 'x' || h == 0 || w == 0 || !in.eof()) {
    throw UsageError(std::string(what) + " must look like 256x192, got '" + s + "'");
  }
  return {h, w};
}

struct Reference {
  double params_m, gflops;
};

// Published sizes of the four standard models with the classic decoder at 256x192.
const std::map<std::string, Reference>& reference_table() {
  static const std::map<std::string, Reference> t{
      {"vit_s", {22, 5.3}}, {"vit_b", {86, 17.1}}, {"vit_l", {307, 59.8}}, {"vit_h", {632, 122.9}}};
  return t;
}

// Published ViT-B costs at 1/8 resolution, 256x192, window (8, 8).
std::optional<double> reference_d8(AttentionMode m) {
  switch (m) {
    case AttentionMode::full: return 76.59;
    case AttentionMode::window: return 66.31;
    case AttentionMode::window_pool:
    case AttentionMode::window_shift_pool: return 66.39;
    case AttentionMode::window_shift: return 66.31;
  }
  return std::nullopt;
}

// Cosine similarity between the task experts of a multi-task model, averaged over blocks.
json task_similarity(const PoseModel& m) {
  const auto& cfg = m.config();
  const std::size_t nt = cfg.num_tasks();
  std::string pattern;
  if (cfg.moe.mode == FfnMode::ps_ffn) pattern = ".ffn.fc2_task.";
  else if (cfg.moe.mode == FfnMode::i_ffn || cfg.moe.mode == FfnMode::is_ffn) pattern = ".ffn.experts.";
  if (nt < 2 || pattern.empty()) return nullptr;
  const std::string suffix = cfg.moe.mode == FfnMode::ps_ffn ? ".weight" : ".fc2.weight";
  std::vector<std::vector<double>> sim(nt, std::vector<double>(nt, 0.0));
  for (std::size_t blk = 0; blk < cfg.backbone.depth; ++blk) {
    const std::string p = "backbone.blocks." + std::to_string(blk) + pattern;
    for (std::size_t i = 0; i < nt; ++i) {
      for (std::size_t j = 0; j < nt; ++j) {
        const Tensor& a = m.param(p + std::to_string(i) + suffix);
        const Tensor& b = m.param(p + std::to_string(j) + suffix);
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t k = 0; k < a.numel(); ++k) ab += a.at(k) * b.at(k), aa += a.at(k) * a.at(k), bb += b.at(k) * b.at(k);
        sim[i][j] += (aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0) / static_cast<double>(cfg.backbone.depth);
      }
    }
  }
  json names = json::array();
  for (const auto& t : cfg.tasks) names.push_back(t.name);
  return {{"tasks", names}, {"cosine", sim}};
}

int cmd_stats(const StatsArgs& a) {
  const Resolved r = resolve(a.common);
  std::optional<PoseModel> loaded;
  ModelConfig cfg = r.cfg.model;
  if (!a.checkpoint.empty()) {
    loaded.emplace(load_checkpoint(a.checkpoint).model);
    cfg = loaded->config();
  }
  if (!a.model.empty()) {
    try {
      cfg.backbone = backbone_preset(a.model);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (a.decoder.empty()) cfg.decoder = DecoderConfig{};
  }
  const auto [h, w] = parse_hw(a.input, "--input");
  cfg.backbone.input_hw = {h, w};
  try {
    if (!a.decoder.empty()) {
      DecoderConfig d = cfg.decoder;
      json j = d;
      j["kind"] = a.decoder;
      cfg.decoder = j.get<DecoderConfig>();
    }
    if (!a.attention.empty()) {
      json j = cfg.backbone;
      j["attention_mode"] = a.attention;
      cfg.backbone = j.get<BackboneConfig>();
    }
    validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (!a.window.empty()) {
    const auto [wh, ww] = parse_hw(a.window, "--window");
    cfg.backbone.window_size = {wh, ww};
  }
  if (a.stride) cfg.backbone.stride = a.stride;
  try {
    validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const ParamsFlops pf = report_params_flops(cfg, h, w);
  json rep = report_header("stats", r, a.common.seed);
  rep["model"] = cfg.backbone.name;
  rep["input"] = {h, w};
  rep["params"] = pf.params;
  rep["params_m"] = pf.params / 1e6;
  rep["backbone_params_m"] = pf.backbone_params / 1e6;
  rep["decoder_params_m"] = pf.decoder_params / 1e6;
  rep["gflops"] = pf.gflops;
  rep["gflops_with_decoder"] = pf.gflops_with_decoder;
  rep["flop_convention"] = pf.convention;
  const auto it = reference_table().find(cfg.backbone.name);
  const bool standard = h == 256 && w == 192 && cfg.decoder.kind == DecoderKind::classic;
  if (it != reference_table().end() && standard && cfg.backbone.stride == 16 &&
      cfg.backbone.attention_mode == AttentionMode::full) {
    rep["reference"] = {{"params_m", it->second.params_m},
                        {"gflops", it->second.gflops},
                        {"params_rel_err", pf.params / 1e6 / it->second.params_m - 1.0},
                        {"gflops_rel_err", pf.gflops / it->second.gflops - 1.0}};
  } else if (cfg.backbone.name == "vit_b" && standard && cfg.backbone.stride == 8 &&
             (cfg.backbone.attention_mode == AttentionMode::full || cfg.backbone.window_size == std::array<std::size_t, 2>{8, 8})) {
    const double ref = *reference_d8(cfg.backbone.attention_mode);
    rep["reference"] = {{"gflops", ref}, {"gflops_rel_err", pf.gflops / ref - 1.0}};
  }
  if (loaded) rep["task_similarity"] = task_similarity(*loaded);
  if (a.common.out != ".") write_json(fs::path(a.common.out) / "stats.json", rep);
  std::cout << rep.dump(2) << "\n";
  return 0;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string out = "synth";
  std::uint64_t seed = 0;
  std::size_t images = 64, keypoints = 17;
  std::string persons = "1", size = "96x96";
};

int cmd_synth(const SynthArgs& a) {
  SynthOptions o;
  o.num_images = a.images;
  o.seed = a.seed;
  o.num_keypoints = a.keypoints;
  const auto dash = a.persons.find('-');
  try {
    o.min_persons = std::stoul(a.persons.substr(0, dash));
    o.max_persons = dash == std::string::npos ? o.min_persons : std::stoul(a.persons.substr(dash + 1));
  } catch (const std::exception&) {
    throw UsageError("--persons must be N or MIN-MAX, got '" + a.persons + "'");
  }
  if (o.min_persons == 0 || o.max_persons < o.min_persons) throw UsageError("--persons range is empty");
  const auto [h, w] = parse_hw(a.size, "--size");
  o.height = h, o.width = w;
  try {
    save_synth(synth_generate(o), a.out);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::cout << json{{"command", "synth"}, {"images", a.images}, {"seed", a.seed}, {"out", a.out}}.dump(2) << "\n";
  return 0;
}

// ---- dump-heatmaps ----------------------------------------------------------

struct DumpArgs {
  Common common;
  std::string checkpoint;
  std::size_t count = 4;
};

int cmd_dump(const DumpArgs& a) {
  const Resolved r = resolve(a.common);
  const fs::path out(a.common.out);
  const PoseModel model = load_checkpoint(a.checkpoint).model;
  ExperimentConfig e = r.cfg;
  e.model = model.config();
  const SynthDataset data = load_data(e).at(0);
  const auto& b = model.config().backbone;
  std::vector<Tensor> images;
  if (bottom_up(model.config())) {
    for (auto& s : make_bottom_up(data)) images.push_back(s.image);
  } else {
    for (auto& s : make_crops(data, b.input_hw[0], b.input_hw[1])) images.push_back(s.image);
  }
  std::vector<NamedTensor> maps;
  for (std::size_t i = 0; i < std::min(a.count, images.size()); ++i) {
    const Shape s = images[i].shape();
    const DecoderOutput y = model.forward(ops::reshape(images[i], {1, s[0], s[1], s[2]}), 0);
    const std::string p = "sample_" + std::to_string(i);
    maps.push_back({p + "/image", images[i]});
    maps.push_back({p + "/heatmaps", ops::reshape(y.heatmaps, {y.heatmaps.dim(1), y.heatmaps.dim(2), y.heatmaps.dim(3)})});
    if (y.tags.defined()) maps.push_back({p + "/tags", ops::reshape(y.tags, {y.tags.dim(1), y.tags.dim(2), y.tags.dim(3)})});
  }
  fs::create_directories(out);
  save_tensors(maps, (out / "heatmaps.vpck").string(),
               {{"checkpoint", parameter_digest(model)}, {"keypoint_names", data.spec.keypoint_names},
                {"config_digest", r.digest}});
  std::cout << json{{"command", "dump-heatmaps"}, {"samples", maps.size()}, {"file", (out / "heatmaps.vpck").string()}}.dump(2)
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision-transformer pose estimation: training, evaluation and model statistics"};
  app.require_subcommand(1);

  TrainArgs train_a;
  auto* train_c = app.add_subcommand("train", "train a model; writes checkpoints and a loss trace");
  add_common(train_c, train_a.common);
  add_preset_flag(train_c, train_a.common);
  train_c->add_option("--init", train_a.init, "start from this checkpoint")->check(CLI::ExistingFile);
  train_c->add_option("--ae-pull-radius", train_a.ae_pull_radius, "bottom-up: tag pull neighbourhood in heatmap cells");

  PretrainArgs pre_a;
  auto* pre_c = app.add_subcommand("pretrain", "masked-patch reconstruction pretraining of the backbone");
  add_common(pre_c, pre_a.common);
  pre_c->add_option("--steps", pre_a.mim.steps, "optimizer steps");
  pre_c->add_option("--mask-ratio", pre_a.mim.mask_ratio, "fraction of masked patches")->check(CLI::Range(0.0, 1.0));
  pre_c->add_option("--batch", pre_a.mim.batch_size, "images per step");
  pre_c->add_option("--lr", pre_a.mim.lr, "learning rate");

  EvalArgs eval_a;
  auto* eval_c = app.add_subcommand("eval", "COCO keypoint AP of predictions or of a checkpoint");
  add_common(eval_c, eval_a.common);
  eval_c->add_option("--annotations", eval_a.annotations, "ground-truth annotation file")->check(CLI::ExistingFile);
  eval_c->add_option("--predictions", eval_a.predictions, "result list or annotation file")->check(CLI::ExistingFile);
  eval_c->add_option("--checkpoint", eval_a.checkpoint, "evaluate this model on the configured data")->check(CLI::ExistingFile);
  eval_c->add_option("--spec", eval_a.spec, "dataset spec (keypoints, sigmas)")->check(CLI::ExistingFile);
  eval_c->add_option("--max-dets", eval_a.max_dets, "detections kept per image");
  eval_c->add_option("--task", eval_a.task, "task name or index for --checkpoint");

  DistillArgs dist_a;
  auto* dist_c = app.add_subcommand("distill", "fit a knowledge token on a teacher, then train a student");
  add_common(dist_c, dist_a.common);
  add_preset_flag(dist_c, dist_a.common);
  dist_c->add_option("--teacher", dist_a.teacher, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  dist_c->add_option("--token-steps", dist_a.token_steps, "knowledge token steps");
  dist_c->add_flag("!--no-output-distill", dist_a.output_distill, "train without the teacher output term");

  MergeArgs merge_a;
  auto* merge_c = app.add_subcommand("merge", "fold a multi-task checkpoint into a single-task one");
  add_common(merge_c, merge_a.common);
  merge_c->add_option("--checkpoint", merge_a.checkpoint, "multi-task checkpoint")->required()->check(CLI::ExistingFile);
  merge_c->add_option("--task", merge_a.task, "task name or index");

  StatsArgs stats_a;
  auto* stats_c = app.add_subcommand("stats", "parameter and FLOP counts");
  add_common(stats_c, stats_a.common);
  stats_c->add_option("--model", stats_a.model, "backbone preset: vit_s, vit_b, vit_l, vit_h, tiny_desk");
  stats_c->add_option("--input", stats_a.input, "input HxW");
  stats_c->add_option("--decoder", stats_a.decoder, "classic, classic_fp, simple, minimal, bottom_up_ae");
  stats_c->add_option("--attention", stats_a.attention, "full, window, window_shift, window_pool, window_shift_pool");
  stats_c->add_option("--window", stats_a.window, "window HxW");
  stats_c->add_option("--stride", stats_a.stride, "patch embedding stride");
  stats_c->add_option("--checkpoint", stats_a.checkpoint, "count this model; adds task similarity")->check(CLI::ExistingFile);

  SynthArgs synth_a;
  auto* synth_c = app.add_subcommand("synth", "write a synthetic keypoint dataset");
  synth_c->add_option("--out", synth_a.out, "output directory");
  synth_c->add_option("--seed", synth_a.seed, "random seed");
  synth_c->add_option("--images", synth_a.images, "number of images")->check(CLI::PositiveNumber);
  synth_c->add_option("--keypoints", synth_a.keypoints, "keypoints per person")->check(CLI::PositiveNumber);
  synth_c->add_option("--persons", synth_a.persons, "persons per image, N or MIN-MAX");
  synth_c->add_option("--size", synth_a.size, "image HxW");

  DumpArgs dump_a;
  auto* dump_c = app.add_subcommand("dump-heatmaps", "write predicted heatmaps as a tensor container");
  add_common(dump_c, dump_a.common);
  dump_c->add_option("--checkpoint", dump_a.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  dump_c->add_option("--count", dump_a.count, "number of samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*train_c) return cmd_train(train_a);
    if (*pre_c) return cmd_pretrain(pre_a);
    if (*eval_c) return cmd_eval(eval_a);
    if (*dist_c) return cmd_distill(dist_a);
    if (*merge_c) return cmd_merge(merge_a);
    if (*stats_c) return cmd_stats(stats_a);
    if (*synth_c) return cmd_synth(synth_a);
    if (*dump_c) return cmd_dump(dump_a);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
