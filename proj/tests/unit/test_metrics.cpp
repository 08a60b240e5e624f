#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "vitpose/metrics.hpp"
#include "vitpose/rng.hpp"
#include "support/coco_oracle.hpp"

using namespace vitpose;
using namespace vitpose::testsupport;

namespace {

std::vector<Prediction> perfect(const std::vector<GtInstance>& gts) {
  std::vector<Prediction> p;
  for (const auto& g : gts) p.push_back({g.image_id, g.keypoints, 1.0});
  return p;
}

}  // namespace

TEST(Oks, IdentityAndFarLimit) {
  Rng rng(1);
  Pose g = random_pose(rng, 50, 50, 20);
  EXPECT_DOUBLE_EQ(*oks(g, g, 900.0, coco_sigmas()), 1.0);
  Pose far = g;
  for (auto& k : far) k.x += 1e6;
  EXPECT_LT(*oks(far, g, 900.0, coco_sigmas()), 1e-12);
}

TEST(Oks, TwoKeypointHandCase) {
  Pose g{{0, 0, 2, 0}, {10, 0, 1, 0}}, p{{3, 4, 2, 0}, {10, 1, 2, 0}};
  const std::vector<double> s{0.1, 0.2};
  const double area = 400.0;
  const double e0 = 25.0 / (2 * area * 4 * 0.01), e1 = 1.0 / (2 * area * 4 * 0.04);
  EXPECT_NEAR(*oks(p, g, area, s), (std::exp(-e0) + std::exp(-e1)) / 2, 1e-12);
}

TEST(Oks, UnlabeledGroundTruthIsUndefined) {
  Pose g(3), p(3);
  EXPECT_FALSE(oks(p, g, 100.0, {0.1, 0.1, 0.1}).has_value());
}

TEST(Oks, SymmetricWhenVisibilitiesMatch) {
  Rng rng(2);
  Pose a = random_pose(rng, 0, 0, 30), b = random_pose(rng, 5, 5, 30);
  EXPECT_DOUBLE_EQ(*oks(a, b, 2500, coco_sigmas()), *oks(b, a, 2500, coco_sigmas()));
}

TEST(CocoEval, PerfectPredictions) {
  Synthetic s = synthetic_set(3);
  EvalReport r = evaluate_coco(perfect(s.gts), s.gts, coco_sigmas());
  EXPECT_DOUBLE_EQ(r.ap, 1.0);
  EXPECT_DOUBLE_EQ(r.ar, 1.0);
  EXPECT_DOUBLE_EQ(r.ap50, 1.0);
  EXPECT_DOUBLE_EQ(r.ap_m, 1.0);
  EXPECT_DOUBLE_EQ(r.ap_l, 1.0);
}

TEST(CocoEval, NoPredictions) {
  Synthetic s = synthetic_set(4);
  EvalReport r = evaluate_coco({}, s.gts, coco_sigmas());
  EXPECT_EQ(r.ap, 0.0);
  EXPECT_EQ(r.ar, 0.0);
}

TEST(CocoEval, MatchesBruteForceOracle) {
  for (std::uint64_t seed : {5, 6, 7, 8}) {
    Synthetic s = synthetic_set(seed);
    ASSERT_EQ(s.gts.size(), 20u);
    EvalReport r = evaluate_coco(s.preds, s.gts, coco_sigmas());
    Oracle o = oracle(s);
    EXPECT_NEAR(r.ap, o.ap, 1e-9) << seed;
    EXPECT_NEAR(r.ap50, o.ap50, 1e-9);
    EXPECT_NEAR(r.ap75, o.ap75, 1e-9);
    EXPECT_NEAR(r.ar, o.ar, 1e-9);
    EXPECT_NEAR(r.ar50, o.ar50, 1e-9);
    // Area-restricted numbers against the same oracle with a range filter.
    double m = 0, l = 0;
    for (int i = 0; i < 10; ++i) {
      m += oracle_at(s, 0.5 + 0.05 * i, 32.0 * 32.0, 96.0 * 96.0).first / 10;
      l += oracle_at(s, 0.5 + 0.05 * i, 96.0 * 96.0, 1e300).first / 10;
    }
    EXPECT_NEAR(r.ap_m, m, 1e-9);
    EXPECT_NEAR(r.ap_l, l, 1e-9);
    EXPECT_LE(r.ap, r.ap50);
  }
}

TEST(CocoEval, ApNonIncreasingInThreshold) {
  Synthetic s = synthetic_set(9);
  double prev = 2.0;
  for (int i = 0; i < 10; ++i) {
    const double ap = average_precision_at(s.preds, s.gts, coco_sigmas(), 0.5 + 0.05 * i);
    EXPECT_LE(ap, prev + 1e-15);
    prev = ap;
  }
}

TEST(CocoEval, ReportJsonKeys) {
  EvalReport r;
  nlohmann::json j = r;
  for (const char* k : {"ap", "ap50", "ap75", "ap_m", "ap_l", "ar", "ar50", "params", "gflops", "flop_convention"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
}

TEST(Pckh, IdentityAndClosedBoundary) {
  Rng rng(10);
  Pose g = random_pose(rng, 0, 0, 50, 16);
  EXPECT_EQ(pckh({g}, {g}, {10.0}).mean, 1.0);
  Pose p = g;
  for (auto& k : p) k.x += 5.0;  // exactly 0.5 * 10
  EXPECT_EQ(pckh({p}, {g}, {10.0}).mean, 1.0);
  for (auto& k : p) k.x += 1e-9;
  EXPECT_EQ(pckh({p}, {g}, {10.0}).mean, 0.0);
  EXPECT_THROW(pckh({g}, {g}, {0.0}), std::invalid_argument);
}

TEST(Pckh, MatchesDirectPerJointCheck) {
  Rng rng(11);
  std::vector<Pose> preds, gts;
  std::vector<double> heads;
  for (int i = 0; i < 12; ++i) {
    Pose g = random_pose(rng, 100, 100, 60, 16);
    if (i % 3 == 0) g[rng.below(16)].v = 0;
    gts.push_back(g);
    preds.push_back(jitter(rng, g, 12.0));
    heads.push_back(rng.uniform(8.0, 20.0));
  }
  PckhResult r = pckh(preds, gts, heads);
  double c = 0, t = 0;
  for (std::size_t k = 0; k < 16; ++k) {
    double ck = 0, tk = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      if (!gts[i][k].v) continue;
      ++tk;
      const double dx = preds[i][k].x - gts[i][k].x, dy = preds[i][k].y - gts[i][k].y;
      if (std::sqrt(dx * dx + dy * dy) <= 0.5 * heads[i]) ++ck;
    }
    EXPECT_EQ(r.per_joint[k], tk ? ck / tk : 0.0);
    c += ck, t += tk;
  }
  EXPECT_EQ(r.mean, c / t);
}

TEST(Pckh, HeadSizeFromBox) { EXPECT_DOUBLE_EQ(head_size_from_box(0, 0, 30, 40), 30.0); }

TEST(Report, TinyDeskTotals) {
  ModelConfig cfg;
  cfg.backbone = backbone_preset("tiny_desk");
  cfg.decoder.deconv_channels = 32;
  ParamsFlops r = report_params_flops(cfg, 32, 24);
  EXPECT_EQ(r.params, r.backbone_params + r.decoder_params);
  const double backbone_macs = 32.0 * 48 * 48 + 2 * (48.0 * 32 * 96 + 2 * 2 * 48 * 16 * 48 + 48 * 32 * 32 + 2 * 48 * 32 * 128);
  EXPECT_DOUBLE_EQ(r.gflops, backbone_macs * 1e-9);
  EXPECT_GT(r.gflops_with_decoder, r.gflops);
  EXPECT_FALSE(r.convention.empty());
}

TEST(Report, VitBAgainstTable) {
  ModelConfig cfg;
  cfg.backbone = backbone_preset("vit_b");
  EXPECT_NEAR(report_params_flops(cfg, 256, 192).gflops, 17.1, 0.05 * 17.1);
}
