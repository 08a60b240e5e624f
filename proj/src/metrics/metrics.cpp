#include "vitpose/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "vitpose/flops.hpp"
#include "vitpose/model.hpp"

namespace vitpose {

const std::vector<double>& coco_sigmas() {
  static const std::vector<double> s{0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
                                     0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089};
  return s;
}

std::optional<double> oks(const Pose& pred, const Pose& gt, double area, const std::vector<double>& sigmas) {
  if (pred.size() != gt.size() || sigmas.size() != gt.size()) {
    throw DimensionError("oks: " + std::to_string(pred.size()) + " predicted, " + std::to_string(gt.size()) +
                         " ground-truth joints and " + std::to_string(sigmas.size()) + " sigmas");
  }
  double sum = 0.0;
  std::size_t n = 0;
  const double a = area + std::numeric_limits<double>::epsilon();
  for (std::size_t k = 0; k < gt.size(); ++k) {
    if (gt[k].v == 0) continue;
    const double dx = pred[k].x - gt[k].x, dy = pred[k].y - gt[k].y;
    const double var = 4.0 * sigmas[k] * sigmas[k];
    sum += std::exp(-(dx * dx + dy * dy) / (2.0 * a * var));
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"ap", r.ap},         {"ap50", r.ap50},     {"ap75", r.ap75},
                     {"ap_m", r.ap_m},     {"ap_l", r.ap_l},     {"ar", r.ar},
                     {"ar50", r.ar50},     {"params", r.params}, {"gflops", r.gflops},
                     {"flop_convention", r.flop_convention}};
}

namespace {

bool labeled(const Pose& p) {
  return std::any_of(p.begin(), p.end(), [](const Keypoint& k) { return k.v > 0; });
}

// Area of the box spanned by the predicted joints.
double pose_box_area(const Pose& p) {
  double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
  for (const Keypoint& k : p) {
    x0 = std::min(x0, k.x), x1 = std::max(x1, k.x);
    y0 = std::min(y0, k.y), y1 = std::max(y1, k.y);
  }
  return p.empty() ? 0.0 : (x1 - x0) * (y1 - y0);
}

const std::vector<double>& thresholds() {
  static const std::vector<double> t = [] {
    std::vector<double> v;
    for (int i = 0; i < 10; ++i) v.push_back(0.5 + 0.05 * i);
    return v;
  }();
  return t;
}

struct RangeResult {
  std::vector<double> ap;  // per threshold; -1 when no gt
  std::vector<double> recall;
};

RangeResult evaluate_range(const std::map<std::int64_t, std::vector<const Prediction*>>& dets,
                           const std::map<std::int64_t, std::vector<const GtInstance*>>& gts,
                           const std::vector<double>& sigmas, double lo, double hi, const std::vector<double>& thr,
                           std::size_t max_dets) {
  struct Det {
    double score;
    std::vector<char> tp, ig;
  };
  std::vector<Det> all;
  std::size_t positives = 0;
  std::set<std::int64_t> images;
  for (const auto& [id, _] : dets) images.insert(id);
  for (const auto& [id, _] : gts) images.insert(id);
  for (std::int64_t id : images) {
    std::vector<const GtInstance*> g;
    if (auto it = gts.find(id); it != gts.end()) g = it->second;
    std::vector<char> g_ignore(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) g_ignore[i] = g[i]->crowd || g[i]->area < lo || g[i]->area >= hi;
    // Non-ignored ground truths first.
    std::vector<std::size_t> gorder(g.size());
    std::iota(gorder.begin(), gorder.end(), std::size_t{0});
    std::stable_sort(gorder.begin(), gorder.end(), [&](std::size_t a, std::size_t b) { return g_ignore[a] < g_ignore[b]; });
    for (std::size_t i = 0; i < g.size(); ++i) positives += !g_ignore[i];

    std::vector<const Prediction*> d;
    if (auto it = dets.find(id); it != dets.end()) d = it->second;
    std::stable_sort(d.begin(), d.end(), [](const Prediction* a, const Prediction* b) { return a->score > b->score; });
    if (d.size() > max_dets) d.resize(max_dets);

    std::vector<std::vector<double>> iou(d.size(), std::vector<double>(g.size()));
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t j = 0; j < g.size(); ++j) iou[i][j] = oks(d[i]->keypoints, g[j]->keypoints, g[j]->area, sigmas).value_or(0.0);
    }
    std::vector<Det> local(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      local[i].score = d[i]->score;
      local[i].tp.assign(thr.size(), 0);
      local[i].ig.assign(thr.size(), 0);
    }
    for (std::size_t t = 0; t < thr.size(); ++t) {
      std::vector<char> taken(g.size(), 0);
      for (std::size_t i = 0; i < d.size(); ++i) {
        double best = std::min(thr[t], 1.0 - 1e-10);
        long m = -1;
        for (std::size_t jj = 0; jj < gorder.size(); ++jj) {
          const std::size_t j = gorder[jj];
          if (taken[j] && !g[j]->crowd) continue;
          if (m > -1 && !g_ignore[m] && g_ignore[j]) break;
          if (iou[i][j] < best) continue;
          best = iou[i][j];
          m = static_cast<long>(j);
        }
        if (m == -1) {
          const double a = pose_box_area(d[i]->keypoints);
          local[i].ig[t] = a < lo || a >= hi;
          continue;
        }
        taken[m] = 1;
        local[i].tp[t] = 1;
        local[i].ig[t] = g_ignore[m];
      }
    }
    for (Det& x : local) all.push_back(std::move(x));
  }

  RangeResult r;
  r.ap.assign(thr.size(), -1.0);
  r.recall.assign(thr.size(), -1.0);
  if (positives == 0) return r;
  std::stable_sort(all.begin(), all.end(), [](const Det& a, const Det& b) { return a.score > b.score; });
  const std::size_t npts = 101;
  for (std::size_t t = 0; t < thr.size(); ++t) {
    std::vector<double> prec, rec;
    double tp = 0, fp = 0;
    for (const Det& x : all) {
      if (x.ig[t]) continue;
      x.tp[t] ? ++tp : ++fp;
      rec.push_back(tp / static_cast<double>(positives));
      prec.push_back(tp / (tp + fp + std::numeric_limits<double>::epsilon()));
    }
    r.recall[t] = rec.empty() ? 0.0 : rec.back();
    for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    double s = 0.0;
    for (std::size_t k = 0; k < npts; ++k) {
      const double rt = static_cast<double>(k) / 100.0;
      auto it = std::lower_bound(rec.begin(), rec.end(), rt);
      if (it != rec.end()) s += prec[static_cast<std::size_t>(it - rec.begin())];
    }
    r.ap[t] = s / static_cast<double>(npts);
  }
  return r;
}

double mean_valid(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v) {
    if (x < 0) continue;
    s += x;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

void group(const std::vector<Prediction>& predictions, const std::vector<GtInstance>& gts,
           std::map<std::int64_t, std::vector<const Prediction*>>& dets,
           std::map<std::int64_t, std::vector<const GtInstance*>>& gt_by_image) {
  for (const auto& p : predictions) dets[p.image_id].push_back(&p);
  for (const auto& g : gts) {
    if (labeled(g.keypoints)) gt_by_image[g.image_id].push_back(&g);
  }
}

}  // namespace

EvalReport evaluate_coco(const std::vector<Prediction>& predictions, const std::vector<GtInstance>& gts,
                         const std::vector<double>& sigmas, const CocoEvalOptions& opt) {
  std::map<std::int64_t, std::vector<const Prediction*>> dets;
  std::map<std::int64_t, std::vector<const GtInstance*>> gt_by_image;
  group(predictions, gts, dets, gt_by_image);
  const auto& thr = thresholds();
  const double inf = std::numeric_limits<double>::infinity();
  RangeResult all = evaluate_range(dets, gt_by_image, sigmas, 0.0, inf, thr, opt.max_dets);
  RangeResult med = evaluate_range(dets, gt_by_image, sigmas, opt.medium_lo, opt.large_lo, thr, opt.max_dets);
  RangeResult large = evaluate_range(dets, gt_by_image, sigmas, opt.large_lo, inf, thr, opt.max_dets);
  EvalReport r;
  r.ap = mean_valid(all.ap);
  r.ap50 = std::max(all.ap[0], 0.0);
  r.ap75 = std::max(all.ap[5], 0.0);
  r.ap_m = mean_valid(med.ap);
  r.ap_l = mean_valid(large.ap);
  r.ar = mean_valid(all.recall);
  r.ar50 = std::max(all.recall[0], 0.0);
  r.flop_convention = FlopCounter::kConvention;
  return r;
}

double average_precision_at(const std::vector<Prediction>& predictions, const std::vector<GtInstance>& gts,
                            const std::vector<double>& sigmas, double threshold, const CocoEvalOptions& opt) {
  std::map<std::int64_t, std::vector<const Prediction*>> dets;
  std::map<std::int64_t, std::vector<const GtInstance*>> gt_by_image;
  group(predictions, gts, dets, gt_by_image);
  RangeResult r = evaluate_range(dets, gt_by_image, sigmas, 0.0, std::numeric_limits<double>::infinity(), {threshold},
                                 opt.max_dets);
  return std::max(r.ap[0], 0.0);
}

PckhResult pckh(const std::vector<Pose>& preds, const std::vector<Pose>& gts, const std::vector<double>& head_sizes,
                double tau) {
  if (preds.size() != gts.size() || head_sizes.size() != gts.size()) {
    throw DimensionError("pckh: predictions, ground truths and head sizes must have equal counts");
  }
  const std::size_t nk = gts.empty() ? 0 : gts[0].size();
  std::vector<double> correct(nk, 0.0), total(nk, 0.0);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (!(head_sizes[i] > 0.0)) throw std::invalid_argument("pckh: head size must be positive");
    if (gts[i].size() != nk || preds[i].size() != nk) throw DimensionError("pckh: inconsistent joint counts");
    const double limit = tau * head_sizes[i];
    for (std::size_t k = 0; k < nk; ++k) {
      if (gts[i][k].v == 0) continue;
      total[k] += 1.0;
      const double d = std::hypot(preds[i][k].x - gts[i][k].x, preds[i][k].y - gts[i][k].y);
      if (d <= limit) correct[k] += 1.0;
    }
  }
  PckhResult r;
  r.per_joint.resize(nk);
  double c = 0.0, t = 0.0;
  for (std::size_t k = 0; k < nk; ++k) {
    r.per_joint[k] = total[k] > 0 ? correct[k] / total[k] : 0.0;
    c += correct[k];
    t += total[k];
  }
  r.mean = t > 0 ? c / t : 0.0;
  return r;
}

double head_size_from_box(double x1, double y1, double x2, double y2) { return 0.6 * std::hypot(x2 - x1, y2 - y1); }

ParamsFlops report_params_flops(const ModelConfig& cfg, std::size_t height, std::size_t width) {
  ParamsFlops r;
  r.params = parameter_count(cfg);
  r.backbone_params = backbone_parameter_count(cfg);
  r.decoder_params = decoder_parameter_count(cfg, 0);
  const auto flops = analytic_flops(cfg, height, width);
  r.gflops = static_cast<double>(sum_with_prefix(flops, "backbone.")) * 1e-9;
  r.gflops_with_decoder = static_cast<double>(sum_with_prefix(flops, "")) * 1e-9;
  r.convention = FlopCounter::kConvention;
  return r;
}

}  // namespace vitpose
