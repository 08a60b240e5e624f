#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vitpose/codec.hpp"
#include "vitpose/config.hpp"

namespace vitpose {

/// Published per-keypoint sigmas of the 17 COCO body joints.
const std::vector<double>& coco_sigmas();

/// Mean over labeled gt joints of exp(-d^2 / (2 * area * (2 sigma)^2)).
/// Returns nullopt when gt has no labeled joint.
std::optional<double> oks(const Pose& pred, const Pose& gt, double area, const std::vector<double>& sigmas);

struct GtInstance {
  std::int64_t image_id = 0;
  Pose keypoints;
  double area = 0.0;
  bool crowd = false;
};

struct Prediction {
  std::int64_t image_id = 0;
  Pose keypoints;
  double score = 0.0;
};

struct EvalReport {
  double ap = 0, ap50 = 0, ap75 = 0, ap_m = 0, ap_l = 0, ar = 0, ar50 = 0;
  std::size_t params = 0;
  double gflops = 0.0;
  std::string flop_convention;
};

void to_json(nlohmann::json& j, const EvalReport& r);

struct CocoEvalOptions {
  std::size_t max_dets = 20;
  double medium_lo = 32.0 * 32.0;
  double large_lo = 96.0 * 96.0;
};

/// COCO keypoint protocol: per image, detections by descending score (at most max_dets)
/// are greedily matched to the unmatched gt of highest OKS at each threshold
/// 0.50:0.05:0.95; precision is interpolated at 101 recall points. Ground truths without
/// labeled joints are dropped. Area ranges: all, medium [32^2, 96^2), large [96^2, inf).
/// A range without ground truth reports 0.
EvalReport evaluate_coco(const std::vector<Prediction>& predictions, const std::vector<GtInstance>& gts,
                         const std::vector<double>& sigmas, const CocoEvalOptions& opt = {});

/// AP at one OKS threshold over all areas (used by monotonicity checks).
double average_precision_at(const std::vector<Prediction>& predictions, const std::vector<GtInstance>& gts,
                            const std::vector<double>& sigmas, double threshold, const CocoEvalOptions& opt = {});

struct PckhResult {
  std::vector<double> per_joint;  // fraction correct; 0 for joints never labeled
  double mean = 0.0;  // over all labeled joints
};

/// A joint is correct iff its distance is <= tau * head_size (closed boundary).
PckhResult pckh(const std::vector<Pose>& preds, const std::vector<Pose>& gts, const std::vector<double>& head_sizes,
                double tau = 0.5);

/// Head size from a head box: 0.6 times its diagonal.
double head_size_from_box(double x1, double y1, double x2, double y2);

struct ParamsFlops {
  std::size_t params = 0;  // whole model
  std::size_t backbone_params = 0;
  std::size_t decoder_params = 0;
  double gflops = 0.0;  // backbone MACs, 1e9
  double gflops_with_decoder = 0.0;
  std::string convention;
};

/// Parameter and MAC accounting from layer shapes; equal to what an executed forward records.
ParamsFlops report_params_flops(const ModelConfig& cfg, std::size_t height, std::size_t width);

}  // namespace vitpose
