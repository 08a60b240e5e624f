#include <algorithm>
#include <cmath>
#include <filesystem>

#include "vitpose/ops.hpp"
#include "vitpose/train.hpp"

namespace vitpose {

void adamw_step(Tensor& param, std::span<const double> grad, AdamState& st, double lr, double wd,
                const AdamHyper& h) {
  if (st.t == 0) {
    st.shape = param.shape();
    st.m.assign(param.numel(), 0.0);
    st.v.assign(param.numel(), 0.0);
  } else if (st.shape != param.shape()) {
    throw DimensionError("optimizer state has shape " + shape_str(st.shape) + ", parameter now " +
                         shape_str(param.shape()));
  }
  if (grad.size() != param.numel()) throw DimensionError("gradient size does not match the parameter");
  ++st.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.t));
  const double keep = 1.0 - lr * wd;
  auto p = param.mutable_values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (wd != 0.0) p[i] *= keep;
    st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * grad[i];
    st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double mh = st.m[i] / c1, vh = st.v[i] / c2;
    p[i] -= lr * mh / (std::sqrt(vh) + h.eps);
  }
}

double layerwise_lr(double base_lr, double decay, std::size_t index, std::size_t total) {
  if (index > total) {
    throw std::out_of_range("layer index " + std::to_string(index) + " exceeds " + std::to_string(total));
  }
  return base_lr * std::pow(decay, static_cast<double>(total - index));
}

double lr_schedule(std::size_t step, std::size_t epoch, const TrainConfig& cfg) {
  double m = cfg.warmup_iters == 0 ? 1.0
                                   : std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_iters));
  for (std::size_t d : cfg.lr_drop_epochs) {
    if (epoch > d) m *= cfg.lr_drop_factor;
  }
  return m;
}

std::map<std::string, double> parameter_lrs(const PoseModel& model, const TrainConfig& cfg) {
  const std::size_t depth = model.config().backbone.depth;
  const std::size_t top = num_layer_ids(depth) - 1;
  std::map<std::string, double> out;
  for (const auto& p : model.parameters()) {
    if (!model.trainable(p.name)) continue;
    out[p.name] = layerwise_lr(cfg.base_lr, cfg.layer_wise_decay, layer_index(p.name, depth), top);
  }
  return out;
}

Optimizer::Optimizer(const PoseModel& model, const TrainConfig& cfg) : cfg_(cfg), lr_(parameter_lrs(model, cfg)) {
  for (const auto& s : parameter_specs(model.config())) decay_[s.name] = s.weight_decay;
}

void Optimizer::step(PoseModel& model, double multiplier) {
  const AdamHyper h{cfg_.beta1, cfg_.beta2, cfg_.adam_eps};
  for (auto& p : model.parameters()) {
    auto it = lr_.find(p.name);
    if (it == lr_.end() || !p.tensor.has_grad()) continue;
    const auto d = decay_.find(p.name);
    const double wd = d != decay_.end() && d->second ? cfg_.weight_decay : 0.0;
    adamw_step(p.tensor, p.tensor.grad_view(), state_[p.name], it->second * multiplier, wd, h);
  }
  if (cfg_.round_params_to_float) model.round_to_float();
}

namespace {

Tensor stack_images(const std::vector<const Tensor*>& images) {
  Shape s = images.front()->shape();
  s.insert(s.begin(), images.size());
  Tensor out(s);
  const std::size_t per = images.front()->numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->numel() != per) throw DimensionError("images in a batch differ in size");
    std::copy(images[i]->values().begin(), images[i]->values().end(), out.data() + i * per);
  }
  return out;
}

std::size_t pool_index_task(const std::vector<std::vector<std::size_t>>& pools, std::size_t t, std::size_t i) {
  return pools.at(t).at(i);
}

struct LoopHooks {
  // Loss of one micro-batch: (task, indices into the task pool, rng) -> scalar tensor.
  std::function<Tensor(std::size_t, const std::vector<std::size_t>&, Rng&)> loss;
  std::function<double()> evaluate;  // may be empty
};

TrainRun run_loop(PoseModel& model, const std::vector<std::size_t>& pool_sizes, const TrainConfig& cfg,
                  const TrainOptions& opt, const LoopHooks& hooks) {
  validate(cfg);
  MultitaskSampler sampler(pool_sizes, cfg.batch_size, opt.seed);
  Optimizer optim(model, cfg);
  const std::size_t per_epoch = sampler.batches_per_epoch();
  const std::size_t total = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * per_epoch;
  const Rng root = Rng(opt.seed).fork(0x5eed);
  TrainRun run;
  auto save = [&](const std::string& file, std::size_t step) {
    if (opt.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(opt.checkpoint_dir);
    const std::string path = (std::filesystem::path(opt.checkpoint_dir) / file).string();
    save_checkpoint(model, path, {step, opt.seed, step, opt.checkpoint_extra});
    run.checkpoints.push_back(path);
  };
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t epoch = step / per_epoch + 1;
    const auto batch = sampler.next();
    std::size_t count = 0;
    for (const auto& mb : batch) count += mb.indices.size();
    Rng rng = root.fork(step);
    model.zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeGuard guard(tape);
      for (const auto& mb : batch) {
        Tensor l = ops::scale(hooks.loss(mb.task, mb.indices, rng),
                              static_cast<double>(mb.indices.size()) / static_cast<double>(count));
        loss = loss.defined() ? ops::add(loss, l) : l;
      }
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw NonFiniteLoss(step);
    tape.backward(loss);
    optim.step(model, lr_schedule(step, epoch, cfg));
    run.loss_trace.push_back(value);
    run.steps = step + 1;
    if (opt.on_step) opt.on_step(step, value);
    const bool epoch_end = (step + 1) % per_epoch == 0;
    if (epoch_end && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && step + 1 < total) {
      save("epoch_" + std::to_string(epoch) + ".vpck", step + 1);
    }
    if (hooks.evaluate && cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == total)) {
      const double err = hooks.evaluate();
      run.error_trace.push_back({step + 1, err});
      run.final_error_px = err;
      if (cfg.target_error_px > 0 && err < cfg.target_error_px) break;
    }
  }
  save("final.vpck", run.steps);
  return run;
}

}  // namespace

Pose to_heatmap_coords(const Pose& pose, std::size_t in_h, std::size_t in_w, std::size_t hm_h, std::size_t hm_w) {
  const double fx = static_cast<double>(hm_w) / static_cast<double>(in_w);
  const double fy = static_cast<double>(hm_h) / static_cast<double>(in_h);
  Pose out = pose;
  for (auto& k : out) {
    k.x = (k.x + 0.5) * fx - 0.5;
    k.y = (k.y + 0.5) * fy - 0.5;
  }
  return out;
}

double mean_keypoint_error(const PoseModel& model, const std::vector<CropSample>& data) {
  double sum = 0;
  std::size_t n = 0;
  constexpr std::size_t kChunk = 16;
  for (std::size_t task = 0; task < model.config().num_tasks(); ++task) {
    std::vector<const CropSample*> mine;
    for (const auto& s : data) {
      if (s.task == task) mine.push_back(&s);
    }
    for (std::size_t lo = 0; lo < mine.size(); lo += kChunk) {
      std::vector<const Tensor*> imgs;
      for (std::size_t i = lo; i < std::min(mine.size(), lo + kChunk); ++i) imgs.push_back(&mine[i]->image);
      const Tensor batch = stack_images(imgs);
      const Tensor hm = model.forward(batch, task).heatmaps;
      const auto decoded = decode_batch(hm);
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        const Pose gt = to_heatmap_coords(mine[lo + i]->keypoints, batch.dim(2), batch.dim(3), hm.dim(2), hm.dim(3));
        for (std::size_t k = 0; k < gt.size(); ++k) {
          if (!gt[k].v) continue;
          sum += std::hypot(decoded[i][k].x - gt[k].x, decoded[i][k].y - gt[k].y);
          ++n;
        }
      }
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

TrainRun train(PoseModel& model, const std::vector<CropSample>& data, const TrainConfig& cfg, const TrainOptions& opt) {
  const auto& mc = model.config();
  std::vector<std::vector<std::size_t>> pools(mc.num_tasks());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    if (s.task >= mc.num_tasks()) throw std::invalid_argument("sample " + std::to_string(i) + " has unknown task");
    if (s.keypoints.size() != mc.tasks[s.task].num_keypoints) {
      throw std::invalid_argument("sample " + std::to_string(i) + " has " + std::to_string(s.keypoints.size()) +
                                  " keypoints, task " + mc.tasks[s.task].name + " expects " +
                                  std::to_string(mc.tasks[s.task].num_keypoints));
    }
    pools[s.task].push_back(i);
  }
  std::vector<std::size_t> sizes;
  for (const auto& p : pools) sizes.push_back(p.size());
  LoopHooks hooks;
  hooks.loss = [&](std::size_t task, const std::vector<std::size_t>& idx, Rng& rng) {
    std::vector<const Tensor*> imgs;
    std::vector<Pose> poses;
    for (std::size_t i : idx) {
      const auto& s = data[pool_index_task(pools, task, i)];
      imgs.push_back(&s.image);
      poses.push_back(s.keypoints);
    }
    const Tensor images = stack_images(imgs);
    RunOptions ro;
    ro.training = true;
    ro.rng = &rng;
    if (opt.knowledge_token.defined()) ro.knowledge_token = opt.knowledge_token.detach();
    const Tensor hm = model.forward(images, task, ro).heatmaps;
    for (auto& p : poses) p = to_heatmap_coords(p, images.dim(2), images.dim(3), hm.dim(2), hm.dim(3));
    const HeatmapTargets t = encode_batch(poses, hm.dim(2), hm.dim(3), cfg.sigma);
    Tensor loss = heatmap_mse_loss(hm, t.heatmaps, t.weights);
    if (opt.teacher) {
      const Tensor th = opt.teacher->forward(images, task).heatmaps;
      loss = ops::add(loss, output_distill_loss(hm, th));
    }
    return loss;
  };
  if (cfg.target_error_px > 0) hooks.evaluate = [&] { return mean_keypoint_error(model, data); };
  return run_loop(model, sizes, cfg, opt, hooks);
}

TrainRun train_bottom_up(PoseModel& model, const std::vector<BottomUpSample>& data, const TrainConfig& cfg,
                         const TrainOptions& opt) {
  const auto& mc = model.config();
  if (mc.decoder.kind != DecoderKind::bottom_up_ae) throw std::invalid_argument("bottom-up training needs the AE decoder");
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  LoopHooks hooks;
  hooks.loss = [&](std::size_t task, const std::vector<std::size_t>& idx, Rng& rng) {
    std::vector<const Tensor*> imgs;
    for (std::size_t i : idx) imgs.push_back(&data[i].image);
    const Tensor images = stack_images(imgs);
    RunOptions ro;
    ro.training = true;
    ro.rng = &rng;
    const DecoderOutput out = model.forward(images, task, ro);
    const std::size_t hh = out.heatmaps.dim(2), hw = out.heatmaps.dim(3);
    const std::size_t nk = mc.tasks[task].num_keypoints;
    Tensor target({idx.size(), nk, hh, hw}), weight({idx.size(), nk}, 1.0);
    std::vector<std::vector<Pose>> persons(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      for (const Pose& p : data[idx[b]].persons) {
        if (p.size() != nk) throw std::invalid_argument("person keypoint count does not match the task");
        const Pose hp = to_heatmap_coords(p, images.dim(2), images.dim(3), hh, hw);
        persons[b].push_back(hp);
        const HeatmapTargets t = encode_targets(hp, hh, hw, cfg.sigma);
        double* dst = target.data() + b * nk * hh * hw;
        const double* src = t.heatmaps.data();
        for (std::size_t i = 0; i < nk * hh * hw; ++i) dst[i] = std::max(dst[i], src[i]);
      }
    }
    Tensor loss = heatmap_mse_loss(out.heatmaps, target, weight);
    const AeLoss ae = ae_loss(out.tags, persons, mc.decoder.tag_dim, opt.ae_pull_radius);
    return ops::add(loss, ops::scale(ae.total, opt.ae_weight));
  };
  return run_loop(model, {data.size()}, cfg, opt, hooks);
}

Tensor random_patch_mask(std::size_t n, std::size_t t, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in [0, 1)");
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(t)));
  Tensor m({n, t});
  std::vector<std::size_t> idx(t);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < t; ++i) idx[i] = i;
    rng.shuffle(idx);
    for (std::size_t i = 0; i < k; ++i) m.data()[b * t + idx[i]] = 1.0;
  }
  return m;
}

Tensor patchify(const Tensor& images, std::size_t p) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (h % p || w % p) throw DimensionError("image size is not a multiple of the patch size");
  const std::size_t gh = h / p, gw = w / p;
  // [N,C,gh,p,gw,p] -> [N,gh,gw,C,p,p]
  Tensor x = ops::reshape(images, {n, c, gh, p, gw, p});
  x = ops::permute(x, {0, 2, 4, 1, 3, 5});
  return ops::reshape(x, {n, gh * gw, c * p * p});
}

Tensor mim_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  double masked = 0;
  for (double v : mask.values()) masked += v;
  if (masked == 0.0) return Tensor::scalar(0.0);
  const Tensor per_token = ops::mean_axis(ops::square(ops::sub(pred, target)), 2);
  return ops::scale(ops::sum(ops::mul(per_token, mask)), 1.0 / masked);
}

MimResult pretrain_mim(PoseModel& model, const std::vector<Tensor>& images, const MimOptions& opt) {
  const auto& b = model.config().backbone;
  if (b.patch_size != b.stride) throw std::invalid_argument("masked pretraining needs non-overlapping patches");
  if (!(opt.mask_ratio > 0.0 && opt.mask_ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1)");
  if (images.empty()) throw std::invalid_argument("no images for pretraining");
  const std::size_t c = b.dim, pdim = 3 * b.patch_size * b.patch_size;
  Rng init(opt.seed);
  Tensor mask_token = init.truncated_normal_tensor({c}, 0.02).set_requires_grad(true);
  Tensor head_w = init.truncated_normal_tensor({c, pdim}, 0.02).set_requires_grad(true);
  Tensor head_b = Tensor({pdim}, 0.0, true);
  std::vector<std::pair<Tensor*, AdamState>> extra{{&mask_token, {}}, {&head_w, {}}, {&head_b, {}}};
  std::map<std::string, AdamState> states;
  MultitaskSampler sampler({images.size()}, opt.batch_size, opt.seed);
  const Rng root = Rng(opt.seed).fork(0x313);
  MimResult res;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    const auto draw = sampler.next();
    std::vector<const Tensor*> batch;
    for (std::size_t i : draw.at(0).indices) batch.push_back(&images[i]);
    const Tensor x = stack_images(batch);
    Rng rng = root.fork(step);
    const Tensor mask = random_patch_mask(x.dim(0), (x.dim(2) / b.stride) * (x.dim(3) / b.stride), opt.mask_ratio, rng);
    model.zero_grad();
    for (auto& e : extra) e.first->zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeGuard guard(tape);
      RunOptions ro;
      ro.training = true;
      ro.rng = &rng;
      ro.mask_token = mask_token;
      ro.mask = mask;
      const Tensor tokens = model.encode(x, 0, ro);
      loss = mim_loss(ops::linear(tokens, head_w, head_b), patchify(x, b.patch_size), mask);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw NonFiniteLoss(step);
    res.loss_trace.push_back(value);
    tape.backward(loss);
    for (auto& p : model.parameters()) {
      if (p.name.rfind("backbone.", 0) != 0 || !model.trainable(p.name) || !p.tensor.has_grad()) continue;
      adamw_step(p.tensor, p.tensor.grad_view(), states[p.name], opt.lr, opt.weight_decay);
    }
    for (auto& e : extra) {
      if (e.first->has_grad()) adamw_step(*e.first, e.first->grad_view(), e.second, opt.lr, 0.0);
    }
    model.round_to_float();
  }
  return res;
}

}  // namespace vitpose
