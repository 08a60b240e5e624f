#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "vitpose/flops.hpp"
#include "vitpose/gradcheck.hpp"
#include "vitpose/model.hpp"
#include "vitpose/moe.hpp"
#include "vitpose/ops.hpp"

using namespace vitpose;
namespace o = vitpose::ops;

namespace {

Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return o::sum(o::mul(y, rng.uniform_tensor(y.shape(), -1.0, 1.0)));
}

AttentionWeights random_attention(Rng& rng, std::size_t c, double s = 0.3) {
  AttentionWeights w;
  w.qkv_w = rng.uniform_tensor({c, 3 * c}, -s, s);
  w.qkv_b = rng.uniform_tensor({3 * c}, -s, s);
  w.proj_w = rng.uniform_tensor({c, c}, -s, s);
  w.proj_b = rng.uniform_tensor({c}, -s, s);
  return w;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.at(i) - b.at(i)) / std::max(1e-12, std::max(std::abs(a.at(i)), std::abs(b.at(i)))));
  }
  return m;
}

// Small model used where every coordinate gets perturbed.
ModelConfig micro_config(DecoderKind kind = DecoderKind::classic) {
  ModelConfig cfg;
  cfg.backbone = backbone_preset("tiny_desk");
  cfg.backbone.dim = 8;
  cfg.backbone.input_hw = {16, 12};
  cfg.backbone.window_size = {2, 3};
  cfg.decoder.kind = kind;
  cfg.decoder.deconv_channels = 4;
  cfg.tasks = {{"coco", 2}};
  return cfg;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.backbone = backbone_preset("tiny_desk");
  cfg.decoder.deconv_channels = 32;
  return cfg;
}

// Gives every parameter a nonzero random value so that zero-initialised pieces also matter.
void randomize(PoseModel& m, std::uint64_t seed, double s = 0.2) {
  Rng rng(seed);
  for (auto& p : m.parameters()) {
    for (double& v : p.tensor.mutable_values()) v = rng.uniform(-s, s) + (p.name.find("norm") != std::string::npos ? 1.0 : 0.0);
  }
}

}  // namespace

// ---- patch embedding --------------------------------------------------------

TEST(PatchEmbed, TokenCounts) {
  struct Case {
    std::size_t h, w, patch, stride, tokens;
  };
  for (const Case& k : {Case{64, 64, 16, 16, 16}, Case{256, 192, 16, 16, 192}, Case{256, 192, 16, 8, 768}}) {
    BackboneConfig b = backbone_preset("tiny_desk");
    b.dim = 4, b.heads = 2, b.patch_size = k.patch, b.stride = k.stride, b.input_hw = {k.h, k.w};
    Rng rng(1);
    Tensor w = rng.normal_tensor({4, 3, k.patch, k.patch}, 0.02);
    Tensor pos({b.grid_h() * b.grid_w(), 4});
    Tensor y = patch_embed(Tensor({1, 3, k.h, k.w}, 0.5), w, Tensor({4}), pos, b);
    EXPECT_EQ(y.shape(), (Shape{1, k.tokens, 4}));
  }
}

TEST(PatchEmbed, RejectsIndivisibleInput) {
  BackboneConfig b = backbone_preset("tiny_desk");
  Tensor w({32, 3, 4, 4}), pos({48, 32});
  EXPECT_THROW(patch_embed(Tensor({1, 3, 30, 24}), w, Tensor({32}), pos, b), DimensionError);
}

TEST(PatchEmbed, Gradient) {
  BackboneConfig b = backbone_preset("tiny_desk");
  b.dim = 4, b.heads = 2, b.patch_size = 4, b.stride = 2, b.input_hw = {8, 6};
  Rng rng(3);
  Tensor img = rng.uniform_tensor({1, 3, 8, 6}, -1, 1);
  Tensor w = rng.uniform_tensor({4, 3, 4, 4}, -0.3, 0.3), bias = rng.uniform_tensor({4}, -0.3, 0.3);
  Tensor pos = rng.uniform_tensor({12, 4}, -0.3, 0.3);
  auto r = grad_check([&] { return probe(patch_embed(img, w, bias, pos, b)); }, {img, w, bias, pos});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(PatchEmbed, ResizedPositionEmbeddingIsBilinear) {
  // A position embedding that is constant over the grid stays constant after resizing.
  Tensor pos({6, 2}, 0.75);
  Tensor r = resize_pos_embed(pos, 3, 2, 6, 4);
  EXPECT_EQ(r.shape(), (Shape{24, 2}));
  for (double v : r.values()) EXPECT_NEAR(v, 0.75, 1e-12);
}

// ---- attention --------------------------------------------------------------

TEST(Mhsa, SingleTokenIsValueThenProjection) {
  Rng rng(4);
  const std::size_t c = 6;
  AttentionWeights w = random_attention(rng, c);
  Tensor x = rng.uniform_tensor({2, 1, c}, -1, 1);
  Tensor y = mhsa(x, w, 3);
  Tensor v = o::linear(x, o::slice(w.qkv_w, 1, 2 * c, c), o::slice(w.qkv_b, 0, 2 * c, c));
  Tensor expect = o::linear(v, w.proj_w, w.proj_b);
  EXPECT_LT(max_abs_diff(y, expect), 1e-12);
}

TEST(Mhsa, PermutationEquivariant) {
  Rng rng(5);
  AttentionWeights w = random_attention(rng, 8);
  Tensor x = rng.uniform_tensor({1, 5, 8}, -1, 1);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor px = o::index_select(o::reshape(x, {5, 8}), perm);
  Tensor y = o::reshape(mhsa(x, w, 2), {5, 8});
  Tensor py = o::reshape(mhsa(o::reshape(px, {1, 5, 8}), w, 2), {5, 8});
  EXPECT_LT(max_abs_diff(o::index_select(y, perm), py), 1e-12);
}

TEST(Mhsa, HeadMismatchThrows) {
  Rng rng(6);
  AttentionWeights w = random_attention(rng, 6);
  EXPECT_THROW(mhsa(Tensor({1, 2, 6}), w, 4), DimensionError);
}

TEST(Mhsa, Gradient) {
  Rng rng(7);
  AttentionWeights w = random_attention(rng, 6);
  Tensor x = rng.uniform_tensor({2, 4, 6}, -1, 1);
  Tensor extra = rng.uniform_tensor({2, 2, 6}, -1, 1);
  auto r = grad_check([&] { return probe(mhsa(x, w, 3, extra)); }, {x, w.qkv_w, w.qkv_b, w.proj_w, w.proj_b, extra});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(WindowAttention, SingleWindowEqualsFull) {
  Rng rng(8);
  AttentionWeights w = random_attention(rng, 8);
  Tensor grid = rng.uniform_tensor({2, 4, 3, 8}, -1, 1);
  Tensor win = window_attention(grid, w, 2, {4, 3, false, false});
  Tensor full = mhsa(o::reshape(grid, {2, 12, 8}), w, 2);
  EXPECT_LT(max_abs_diff(o::reshape(win, {2, 12, 8}), full), 1e-6);
}

TEST(WindowAttention, PaddedTokensGetNoWeight) {
  // A 3x3 grid inside one padded 4x4 window must equal full attention over the 9 real tokens.
  Rng rng(9);
  AttentionWeights w = random_attention(rng, 4);
  Tensor grid = rng.uniform_tensor({1, 3, 3, 4}, -1, 1);
  Tensor win = window_attention(grid, w, 2, {4, 4, false, false});
  Tensor full = mhsa(o::reshape(grid, {1, 9, 4}), w, 2);
  EXPECT_LT(max_abs_diff(o::reshape(win, {1, 9, 4}), full), 1e-9);
}

TEST(WindowAttention, PoolModeKeyCount) {
  Rng rng(10);
  AttentionWeights w = random_attention(rng, 4);
  FlopCounter fc;
  {
    FlopCounterGuard g(fc);
    window_attention(rng.uniform_tensor({1, 16, 16, 4}, -1, 1), w, 1, {8, 8, false, true});
  }
  // 4 windows x 1 head x 64 queries x 4 channels x (64 + 4) keys
  EXPECT_EQ(fc.per_layer().at("attn.scores"), 4u * 64u * 4u * 68u);
}

TEST(WindowAttention, WindowTooLargeThrows) {
  Rng rng(11);
  AttentionWeights w = random_attention(rng, 4);
  EXPECT_THROW(window_attention(Tensor({1, 2, 2, 4}), w, 2, {0, 2, false, false}), std::invalid_argument);
}

TEST(WindowAttention, GridRollInverse) {
  Rng rng(12);
  Tensor g = rng.uniform_tensor({2, 5, 7, 3}, -1, 1);
  Tensor back = grid_roll(grid_roll(g, -2, -3), 2, 3);
  for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_EQ(g.at(i), back.at(i));
}

namespace {

// d out[0,0,0,:] / d in[0,h-1,w-1,:] after two blocks sharing attention weights.
double corner_jacobian(bool shift) {
  Rng rng(13);
  const std::size_t c = 4, gh = 8, gw = 8;
  AttentionWeights w0 = random_attention(rng, c), w1 = random_attention(rng, c);
  Tensor grid = rng.uniform_tensor({1, gh, gw, c}, -1, 1);
  grid.set_requires_grad(true);
  Tape tape;
  Tensor out;
  {
    TapeGuard guard(tape);
    Tensor y = o::add(grid, window_attention(grid, w0, 2, {4, 4, false, false}));
    y = o::add(y, window_attention(y, w1, 2, {4, 4, shift, false}));
    out = o::sum(o::slice(o::reshape(y, {gh * gw, c}), 0, 0, 1));
  }
  tape.backward(out);
  double s = 0.0;
  for (std::size_t k = 0; k < c; ++k) s += std::abs(grid.grad_view()[(gh * gw - 1) * c + k]);
  return s;
}

}  // namespace

TEST(WindowAttention, ShiftConnectsOppositeCorners) {
  EXPECT_GT(corner_jacobian(true), 1e-8);
  EXPECT_EQ(corner_jacobian(false), 0.0);
}

TEST(WindowAttention, GradientAllModes) {
  for (bool shift : {false, true}) {
    for (bool pool : {false, true}) {
      Rng rng(14);
      AttentionWeights w = random_attention(rng, 4);
      w.rel_table = rng.uniform_tensor({(2 * 2 - 1) * (2 * 3 - 1), 2}, -0.5, 0.5);
      Tensor grid = rng.uniform_tensor({1, 3, 5, 4}, -1, 1);
      auto r = grad_check([&] { return probe(window_attention(grid, w, 2, {2, 3, shift, pool})); },
                          {grid, w.qkv_w, w.qkv_b, w.proj_w, w.proj_b, w.rel_table});
      EXPECT_LT(r.max_rel_error, 1e-4) << "shift=" << shift << " pool=" << pool;
    }
  }
}

TEST(WindowAttention, RelativeBiasZeroTableIsNoOp) {
  Rng rng(15);
  AttentionWeights w = random_attention(rng, 4);
  Tensor grid = rng.uniform_tensor({1, 4, 6, 4}, -1, 1);
  Tensor a = window_attention(grid, w, 2, {2, 3, false, false});
  w.rel_table = Tensor({3 * 5, 2});
  Tensor b = window_attention(grid, w, 2, {2, 3, false, false});
  EXPECT_LT(max_abs_diff(a, b), 1e-15);
}

// ---- blocks and backbone ----------------------------------------------------

TEST(TransformerBlock, ZeroProjectionsGiveIdentity) {
  PoseModel m(tiny_config(), 1);
  BlockWeights w = m.block(0);
  Rng rng(16);
  w.attn.proj_w = Tensor({32, 32});
  w.ffn.shared.fc2_w = Tensor({128, 32});
  Tensor x = rng.uniform_tensor({2, 48, 32}, -1, 1);
  BlockContext ctx;
  ctx.heads = 2;
  Tensor y = transformer_block(x, w, ctx);
  EXPECT_LT(max_abs_diff(x, y), 1e-15);
}

TEST(TransformerBlock, TrainWithZeroDropPathEqualsEval) {
  PoseModel m(tiny_config(), 2);
  Rng rng(17), r2(3);
  Tensor x = rng.uniform_tensor({2, 48, 32}, -1, 1);
  BlockContext ctx;
  ctx.heads = 2;
  Tensor eval = transformer_block(x, m.block(0), ctx);
  ctx.training = true;
  ctx.rng = &r2;
  Tensor train = transformer_block(x, m.block(0), ctx);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(eval.at(i), train.at(i));
}

TEST(TransformerBlock, DropPathScalesSurvivors) {
  Rng rng(18);
  Tensor x({400, 1}, 1.0);
  Tensor y = drop_path(x, 0.25, true, &rng);
  std::size_t kept = 0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    kept += v != 0.0;
  }
  EXPECT_NEAR(kept / 400.0, 0.75, 0.08);
}

TEST(TransformerBlock, TwoStackedBlocksGradient) {
  ModelConfig cfg = micro_config();
  PoseModel m(cfg, 3);
  randomize(m, 4);
  Rng rng(19);
  Tensor x = rng.uniform_tensor({1, 12, 8}, -1, 1);
  BlockContext ctx;
  ctx.heads = 2;
  std::vector<Tensor> params{x};
  for (const auto& p : m.parameters()) {
    if (p.name.rfind("backbone.blocks.", 0) == 0) params.push_back(p.tensor);
  }
  auto r = grad_check([&] { return probe(transformer_block(transformer_block(x, m.block(0), ctx), m.block(1), ctx)); },
                      params);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Backbone, PresetsAndUnknownName) {
  EXPECT_EQ(backbone_preset("vit_b").dim, 768u);
  EXPECT_EQ(backbone_preset("vit_l").depth, 24u);
  EXPECT_EQ(backbone_preset("vit_h").dim, 1280u);
  EXPECT_EQ(backbone_preset("vit_s").heads, 6u);
  EXPECT_THROW(backbone_preset("vit_x"), std::invalid_argument);
}

TEST(Backbone, TinyDeskCountMatchesLayerArithmetic) {
  ModelConfig cfg = tiny_config();
  const std::size_t c = 32, h = 128, p = 4, d = 32, nk = 17;
  const std::size_t patch = c * 3 * p * p + c, pos = 8 * 6 * c;
  const std::size_t block = 2 * (2 * c) + (c * 3 * c + 3 * c) + (c * c + c) + (c * h + h + h * c + c);
  const std::size_t backbone = patch + pos + 2 * block + 2 * c;
  const std::size_t decoder = c * d * 16 + 2 * d + d * d * 16 + 2 * d + nk * d + nk;
  EXPECT_EQ(backbone_parameter_count(cfg), backbone);
  EXPECT_EQ(decoder_parameter_count(cfg), decoder);
  EXPECT_EQ(parameter_count(cfg), backbone + decoder);
  PoseModel m(cfg, 0);
  EXPECT_EQ(m.num_parameters(), backbone + decoder);
}

TEST(Backbone, LargePresetCountsWithinTable) {
  struct Row {
    const char* name;
    double backbone_m;
  };
  for (const Row& r : {Row{"vit_s", 22}, Row{"vit_b", 86}, Row{"vit_l", 307}, Row{"vit_h", 632}}) {
    ModelConfig cfg;
    cfg.backbone = backbone_preset(r.name);
    const double got = backbone_parameter_count(cfg) / 1e6;
    EXPECT_NEAR(got, r.backbone_m, 0.05 * r.backbone_m) << r.name;
  }
}

TEST(Backbone, FreezeFfnLeavesNonFfnTrainable) {
  ModelConfig cfg = tiny_config();
  PoseModel m(cfg, 0);
  m.apply_freeze({false, true, false});
  const std::size_t ffn = 2 * (32 * 128 + 128 + 128 * 32 + 32);
  EXPECT_EQ(m.num_trainable_parameters(), parameter_count(cfg) - ffn);
  for (const auto& p : m.parameters()) {
    EXPECT_EQ(p.tensor.requires_grad(), p.name.find(".ffn.") == std::string::npos) << p.name;
  }
}

TEST(Backbone, FreezeGroups) {
  EXPECT_EQ(param_group("backbone.blocks.0.attn.qkv.weight"), ParamGroup::mhsa);
  EXPECT_EQ(param_group("backbone.blocks.3.ffn.fc2_task.1.bias"), ParamGroup::ffn);
  EXPECT_EQ(param_group("backbone.pos_embed"), ParamGroup::patch_embed);
  EXPECT_EQ(param_group("backbone.blocks.1.norm1.weight"), ParamGroup::norm);
  EXPECT_EQ(param_group("decoders.coco.final.weight"), ParamGroup::head);
}

TEST(Backbone, LayerIndexConvention) {
  EXPECT_EQ(layer_index("backbone.patch_embed.weight", 12), 0u);
  EXPECT_EQ(layer_index("backbone.pos_embed", 12), 0u);
  EXPECT_EQ(layer_index("backbone.blocks.0.attn.qkv.weight", 12), 1u);
  EXPECT_EQ(layer_index("backbone.blocks.11.norm2.bias", 12), 12u);
  EXPECT_EQ(layer_index("backbone.norm.weight", 12), 13u);
  EXPECT_EQ(layer_index("decoders.coco.final.weight", 12), 13u);
  EXPECT_EQ(num_layer_ids(12), 14u);
  EXPECT_THROW(layer_index("backbone.blocks.12.norm1.weight", 12), std::out_of_range);
}

TEST(Backbone, EvalForwardIsDeterministicAndRngFree) {
  ModelConfig cfg = tiny_config();
  cfg.backbone.drop_path_rate = 0.3;
  PoseModel m(cfg, 5);
  Rng rng(20), a(1), b(2);
  Tensor img = rng.uniform_tensor({2, 3, 32, 24}, -1, 1);
  RunOptions ra, rb;
  ra.rng = &a;
  rb.rng = &b;
  Tensor ya = m.forward(img, 0, ra).heatmaps, yb = m.forward(img, 0, rb).heatmaps;
  for (std::size_t i = 0; i < ya.numel(); ++i) ASSERT_EQ(ya.at(i), yb.at(i));
}

TEST(Backbone, WindowFlopsBelowFull) {
  ModelConfig cfg = tiny_config();
  cfg.backbone.window_size = {2, 3};
  auto full = analytic_flops(cfg, 32, 24);
  cfg.backbone.attention_mode = AttentionMode::window;
  auto win = analytic_flops(cfg, 32, 24);
  EXPECT_LT(sum_with_prefix(win, "backbone."), sum_with_prefix(full, "backbone."));
}

TEST(Backbone, InitialisationConvention) {
  PoseModel m(tiny_config(), 7);
  const Tensor& qkv = m.param("backbone.blocks.0.attn.qkv.weight");
  double s = 0.0, mx = 0.0;
  for (double v : qkv.values()) {
    s += v * v;
    mx = std::max(mx, std::abs(v));
  }
  EXPECT_NEAR(std::sqrt(s / qkv.numel()), 0.02, 0.004);
  EXPECT_LE(mx, 0.04 + 1e-9);
  for (double v : m.param("backbone.blocks.0.attn.qkv.bias").values()) EXPECT_EQ(v, 0.0);
  for (double v : m.param("backbone.norm.weight").values()) EXPECT_EQ(v, 1.0);
  // Stored values are exactly representable in single precision.
  for (double v : qkv.values()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

// ---- FFN factorisation ------------------------------------------------------

namespace {

ModelConfig moe_config(FfnMode mode, std::size_t tasks) {
  ModelConfig cfg = micro_config();
  cfg.moe.mode = mode;
  cfg.tasks.clear();
  for (std::size_t t = 0; t < tasks; ++t) cfg.tasks.push_back({"t" + std::to_string(t), 2 + t});
  return cfg;
}

}  // namespace

TEST(MoE, PsSingleTaskEqualsConcatenatedPlainFfn) {
  PoseModel m(moe_config(FfnMode::ps_ffn, 1), 8);
  randomize(m, 9);
  const MoeFfnWeights& w = m.block(0).ffn;
  Rng rng(21);
  Tensor x = rng.uniform_tensor({5, 8}, -1, 1);
  FfnWeights plain{w.shared.fc1_w, w.shared.fc1_b, o::concat({w.fc2_shared_w, w.fc2_task_w[0]}, 1),
                   o::concat({w.fc2_shared_b, w.fc2_task_b[0]}, 0)};
  EXPECT_LT(max_abs_diff(moe_ffn_forward(x, w, 0, Activation::gelu), ffn_forward(x, plain, Activation::gelu)), 1e-14);
}

TEST(MoE, PsInitSlicesOnePlainWeight) {
  // Shared and task slices of the same block come from one draw; every task starts identical.
  PoseModel m(moe_config(FfnMode::ps_ffn, 3), 10);
  const MoeFfnWeights& w = m.block(1).ffn;
  EXPECT_EQ(w.fc2_shared_w.shape(), (Shape{32, 6}));
  EXPECT_EQ(w.fc2_task_w[0].shape(), (Shape{32, 2}));
  for (std::size_t t = 1; t < 3; ++t) {
    for (std::size_t i = 0; i < w.fc2_task_w[0].numel(); ++i) EXPECT_EQ(w.fc2_task_w[0].at(i), w.fc2_task_w[t].at(i));
  }
}

TEST(MoE, IsFfnZeroInitReducesToShared) {
  PoseModel m(moe_config(FfnMode::is_ffn, 3), 11);
  Rng rng(22);
  Tensor x = rng.uniform_tensor({7, 8}, -1, 1);
  const MoeFfnWeights& w = m.block(0).ffn;
  Tensor shared = ffn_forward(x, w.shared, Activation::gelu);
  for (std::size_t t = 0; t < 3; ++t) {
    Tensor y = moe_ffn_forward(x, w, t, Activation::gelu);
    for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_EQ(y.at(i), shared.at(i));
  }
  // The task branch still trains: its second layer receives gradient at step 0.
  Tape tape;
  Tensor loss;
  {
    TapeGuard g(tape);
    loss = probe(moe_ffn_forward(x, w, 1, Activation::gelu));
  }
  tape.backward(loss);
  double s = 0.0;
  for (double v : w.experts[1].fc2_w.grad_view()) s += std::abs(v);
  EXPECT_GT(s, 0.0);
}

TEST(MoE, RoutingIsolation) {
  for (FfnMode mode : {FfnMode::ps_ffn, FfnMode::i_ffn, FfnMode::is_ffn}) {
    PoseModel m(moe_config(mode, 2), 12);
    randomize(m, 13);
    Rng rng(23);
    Tensor img = rng.uniform_tensor({1, 3, 16, 12}, -1, 1);
    Tape tape;
    Tensor loss;
    {
      TapeGuard g(tape);
      loss = probe(m.forward(img, 1).heatmaps);
    }
    tape.backward(loss);
    for (const auto& p : m.parameters()) {
      const bool task0 = p.name.find("fc2_task.0.") != std::string::npos || p.name.find("experts.0.") != std::string::npos ||
                         p.name.rfind("decoders.t0.", 0) == 0;
      if (!task0) continue;
      for (double v : p.tensor.grad_view()) ASSERT_EQ(v, 0.0) << p.name;
    }
  }
}

TEST(MoE, BadTaskIndexThrows) {
  PoseModel m(moe_config(FfnMode::ps_ffn, 2), 14);
  EXPECT_THROW(moe_ffn_forward(Tensor({1, 8}), m.block(0).ffn, 2, Activation::gelu), std::out_of_range);
  EXPECT_THROW(m.forward(Tensor({1, 3, 16, 12}), 2), std::out_of_range);
}

TEST(MoE, MergeEquivalence) {
  PoseModel m(moe_config(FfnMode::ps_ffn, 3), 15);
  randomize(m, 16);
  Rng rng(24);
  for (std::size_t t = 0; t < 3; ++t) {
    PoseModel merged = merge_for_inference(m, t);
    EXPECT_EQ(merged.config().moe.mode, FfnMode::plain);
    for (int i = 0; i < 16; ++i) {
      Tensor img = rng.uniform_tensor({1, 3, 16, 12}, -1, 1);
      Tensor a = m.forward(img, t).heatmaps, b = merged.forward(img, 0).heatmaps;
      EXPECT_LE(max_rel_diff(a, b), 1e-6);
    }
  }
}

TEST(MoE, MergedCountEqualsPlainAndRejectsOtherModes) {
  ModelConfig cfg = moe_config(FfnMode::ps_ffn, 3);
  PoseModel m(cfg, 17);
  PoseModel merged = merge_for_inference(m, 1);
  ModelConfig plain = moe_config(FfnMode::plain, 1);
  plain.tasks = {cfg.tasks[1]};
  EXPECT_EQ(merged.num_parameters(), parameter_count(plain));
  EXPECT_THROW(merge_for_inference(PoseModel(moe_config(FfnMode::is_ffn, 2), 0), 0), std::invalid_argument);
}

TEST(MoE, MergedTasksDifferOnlyInTaskColumns) {
  ModelConfig cfg = moe_config(FfnMode::ps_ffn, 2);
  cfg.tasks[1].num_keypoints = cfg.tasks[0].num_keypoints;
  PoseModel m(cfg, 18);
  randomize(m, 19);
  PoseModel a = merge_for_inference(m, 0), b = merge_for_inference(m, 1);
  const std::size_t c = 8, keep = c - cfg.task_channels();
  for (const auto& p : a.parameters()) {
    if (p.name.rfind("decoders.", 0) == 0) continue;
    const Tensor& q = b.param(p.name);
    const bool fc2 = p.name.find("ffn.fc2.") != std::string::npos;
    for (std::size_t i = 0; i < p.tensor.numel(); ++i) {
      const std::size_t col = i % c;
      if (fc2 && col >= keep) continue;
      ASSERT_EQ(p.tensor.at(i), q.at(i)) << p.name << " " << i;
    }
    if (fc2) {
      bool differs = false;
      for (std::size_t i = 0; i < p.tensor.numel(); ++i) differs = differs || p.tensor.at(i) != q.at(i);
      EXPECT_TRUE(differs) << p.name;
    }
  }
}

TEST(MoE, ParamCountsVitB) {
  const BackboneConfig b = backbone_preset("vit_b");
  MoeParamCounts r = moe_param_count(b, 3, 0.25);
  EXPECT_NEAR(r.ps_ffn_inference / 1e6, 86.0, 0.05 * 86.0);
  EXPECT_NEAR(r.is_ffn_inference / 1e6, 143.0, 0.05 * 143.0);
  EXPECT_EQ(r.ps_ffn_inference, r.plain);
  EXPECT_GT(r.is_ffn_train, r.i_ffn_train);
}

TEST(MoE, SingleTaskCounts) {
  MoeParamCounts r = moe_param_count(backbone_preset("tiny_desk"), 1, 0.25);
  EXPECT_EQ(r.i_ffn_inference, r.plain);
  EXPECT_EQ(r.ps_ffn_inference, r.plain);
  EXPECT_EQ(r.i_ffn_train, r.plain);
  EXPECT_EQ(r.ps_ffn_train, r.plain);
}

TEST(MoE, TinyCountsByHand) {
  const std::size_t c = 32, h = 128, depth = 2, tasks = 3, a = 8;
  const std::size_t ffn = c * h + h + h * c + c;
  MoeParamCounts r = moe_param_count(backbone_preset("tiny_desk"), tasks, 0.25);
  EXPECT_EQ(r.i_ffn_train, r.plain + depth * (tasks - 1) * ffn);
  EXPECT_EQ(r.is_ffn_train, r.plain + depth * tasks * ffn);
  EXPECT_EQ(r.is_ffn_inference, r.plain + depth * ffn);
  EXPECT_EQ(r.ps_ffn_train, r.plain + depth * (tasks - 1) * (h * a + a));
}

TEST(MoE, PartitionMustBeIntegral) {
  ModelConfig cfg = moe_config(FfnMode::ps_ffn, 2);
  cfg.moe.partition_ratio = 0.3;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
}

// ---- decoders ---------------------------------------------------------------

TEST(Decoders, TopDownShapesAgree) {
  for (DecoderKind kind : {DecoderKind::classic, DecoderKind::classic_fp, DecoderKind::simple, DecoderKind::minimal}) {
    ModelConfig cfg = micro_config(kind);
    cfg.tasks = {{"coco", 17}};
    PoseModel m(cfg, 20);
    Tensor f({1, 8, 16, 12}, 0.1);
    EXPECT_EQ(m.decode_head(f, 0, false).heatmaps.shape(), (Shape{1, 17, 64, 48}));
  }
}

TEST(Decoders, SimpleZeroFeaturesGiveBias) {
  PoseModel m(micro_config(DecoderKind::simple), 21);
  randomize(m, 22);
  Tensor y = m.decode_head(Tensor({1, 8, 2, 3}), 0, false).heatmaps;
  const Tensor& b = m.param("decoders.coco.final.bias");
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 0; i < 96; ++i) EXPECT_NEAR(y.at(k * 96 + i), b.at(k), 1e-15);
  }
}

TEST(Decoders, MinimalParamCount) {
  ModelConfig cfg = micro_config(DecoderKind::minimal);
  cfg.tasks = {{"coco", 17}};
  EXPECT_EQ(decoder_parameter_count(cfg), 8u * 16 * 17 + 16 * 17);
}

TEST(Decoders, ClassicFpPredictorIsFrozen) {
  PoseModel m(micro_config(DecoderKind::classic_fp), 23);
  EXPECT_FALSE(m.trainable("decoders.coco.final.weight"));
  EXPECT_FALSE(m.param("decoders.coco.final.weight").requires_grad());
  EXPECT_TRUE(m.trainable("decoders.coco.deconv2.weight"));
}

TEST(Decoders, BottomUpShapes) {
  ModelConfig cfg = micro_config(DecoderKind::bottom_up_ae);
  cfg.backbone.dim = 4;
  cfg.tasks = {{"coco", 17}};
  PoseModel m(cfg, 24);
  DecoderOutput out = m.decode_head(Tensor({1, 4, 64, 64}, 0.1), 0, false);
  EXPECT_EQ(out.heatmaps.shape(), (Shape{1, 17, 128, 128}));
  EXPECT_EQ(out.tags.shape(), (Shape{1, 17, 128, 128}));
}

TEST(Decoders, ClassicRejectsWrongChannels) {
  PoseModel m(micro_config(), 25);
  EXPECT_THROW(m.decode_head(Tensor({1, 6, 2, 3}), 0, false), DimensionError);
}

TEST(Decoders, GradientsAllKinds) {
  for (DecoderKind kind :
       {DecoderKind::classic, DecoderKind::simple, DecoderKind::minimal, DecoderKind::bottom_up_ae}) {
    PoseModel m(micro_config(kind), 26);
    randomize(m, 27);
    Rng rng(28);
    Tensor f = rng.uniform_tensor({2, 8, 2, 3}, -1, 1);
    std::vector<Tensor> params{f};
    for (const auto& p : m.parameters()) {
      if (p.name.rfind("decoders.", 0) == 0) params.push_back(p.tensor);
    }
    auto r = grad_check(
        [&] {
          DecoderOutput out = m.decode_head(f, 0, true);
          Tensor l = probe(out.heatmaps);
          return out.tags.defined() ? o::add(l, probe(out.tags, 5)) : l;
        },
        params);
    EXPECT_LT(r.max_rel_error, 1e-4) << static_cast<int>(kind);
  }
}

TEST(Decoders, PerTaskHeadsAreDisjoint) {
  ModelConfig cfg = micro_config();
  cfg.tasks = {{"a", 2}, {"b", 3}};
  PoseModel m(cfg, 29);
  EXPECT_FALSE(m.head(0).conv_w.same_storage(m.head(1).conv_w));
  Rng rng(30);
  Tensor img = rng.uniform_tensor({1, 3, 16, 12}, -1, 1);
  Tape tape;
  Tensor loss;
  {
    TapeGuard g(tape);
    loss = probe(m.forward(img, 0, {true}).heatmaps);
  }
  tape.backward(loss);
  for (const auto& p : m.parameters()) {
    if (p.name.rfind("decoders.b.", 0) != 0) continue;
    for (double v : p.tensor.grad_view()) ASSERT_EQ(v, 0.0);
  }
}

TEST(Decoders, BatchNormRunningStatsUpdateOnlyInTraining) {
  PoseModel m(micro_config(), 31);
  Rng rng(32);
  Tensor f = rng.uniform_tensor({2, 8, 2, 3}, -1, 1);
  m.decode_head(f, 0, false);
  for (double v : m.head(0).bn1_mean.values()) EXPECT_EQ(v, 0.0);
  m.decode_head(f, 0, true);
  double s = 0.0;
  for (double v : m.head(0).bn1_mean.values()) s += std::abs(v);
  EXPECT_GT(s, 0.0);
}

// ---- whole model ------------------------------------------------------------

TEST(Model, FullForwardGradient) {
  PoseModel m(micro_config(), 33);
  randomize(m, 34);
  Rng rng(35);
  Tensor img = rng.uniform_tensor({2, 3, 16, 12}, -1, 1);
  std::vector<Tensor> params;
  for (const auto& p : m.parameters()) params.push_back(p.tensor);
  auto r = grad_check([&] { return probe(m.forward(img, 0, {true}).heatmaps); }, params);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Model, KnowledgeTokenChangesOutputAndNeedsFullAttention) {
  PoseModel m(micro_config(), 36);
  randomize(m, 37);
  Rng rng(38);
  Tensor img = rng.uniform_tensor({1, 3, 16, 12}, -1, 1);
  RunOptions opt;
  opt.knowledge_token = rng.uniform_tensor({8}, -1, 1);
  Tensor with = m.forward(img, 0, opt).heatmaps, without = m.forward(img, 0).heatmaps;
  EXPECT_EQ(with.shape(), without.shape());
  EXPECT_GT(max_abs_diff(with, without), 1e-6);
  opt.knowledge_token = Tensor({5});
  EXPECT_THROW(m.forward(img, 0, opt), DimensionError);
  ModelConfig wcfg = micro_config();
  wcfg.backbone.attention_mode = AttentionMode::window;
  PoseModel w(wcfg, 0);
  opt.knowledge_token = Tensor({8});
  EXPECT_THROW(w.forward(img, 0, opt), std::invalid_argument);
}

TEST(Model, AnalyticFlopsMatchExecution) {
  for (AttentionMode mode : {AttentionMode::full, AttentionMode::window, AttentionMode::window_shift,
                             AttentionMode::window_pool, AttentionMode::window_shift_pool}) {
    for (FfnMode ffn : {FfnMode::plain, FfnMode::i_ffn, FfnMode::is_ffn, FfnMode::ps_ffn}) {
      for (DecoderKind kind : {DecoderKind::classic, DecoderKind::simple, DecoderKind::minimal, DecoderKind::bottom_up_ae}) {
        ModelConfig cfg = tiny_config();
        cfg.backbone.attention_mode = mode;
        cfg.backbone.window_size = {3, 4};  // does not tile 8x6, exercises padding
        cfg.moe.mode = ffn;
        cfg.decoder.kind = kind;
        cfg.decoder.deconv_channels = 8;
        cfg.tasks = {{"a", 3}, {"b", 2}};
        PoseModel m(cfg, 0);
        Tensor img({2, 3, 32, 24}, 0.25);
        FlopCounter fc;
        {
          FlopCounterGuard g(fc);
          m.forward(img, 1);
        }
        auto expect = analytic_flops(cfg, 32, 24, 2, 1);
        EXPECT_EQ(fc.per_layer(), expect) << static_cast<int>(mode) << "/" << static_cast<int>(ffn) << "/"
                                          << static_cast<int>(kind);
      }
    }
  }
}

TEST(Model, AnalyticFlopsWithKnowledgeToken) {
  ModelConfig cfg = tiny_config();
  PoseModel m(cfg, 0);
  RunOptions opt;
  opt.knowledge_token = Tensor({32}, 0.1);
  FlopCounter fc;
  {
    FlopCounterGuard g(fc);
    m.forward(Tensor({1, 3, 32, 24}), 0, opt);
  }
  EXPECT_EQ(fc.per_layer(), analytic_flops(cfg, 32, 24, 1, 0, true));
}

TEST(Model, TinyDeskFlopsByHand) {
  ModelConfig cfg = tiny_config();
  auto f = analytic_flops(cfg, 32, 24);
  const std::uint64_t t = 48, c = 32, h = 128, heads = 2, dh = 16, d = 32, nk = 17;
  const std::uint64_t patch = c * 3 * 16 * t;
  const std::uint64_t block = t * c * 3 * c + 2 * heads * t * dh * t + t * c * c + 2 * t * c * h;
  const std::uint64_t dec = c * d * 16 * t + d * d * 16 * (4 * t) + nk * d * (16 * t);
  EXPECT_EQ(sum_with_prefix(f, "backbone."), patch + 2 * block);
  EXPECT_EQ(sum_with_prefix(f, "decoders."), dec);
}

TEST(Model, SpecOrderIsStableAndNamesUnique) {
  ModelConfig cfg = moe_config(FfnMode::is_ffn, 2);
  auto a = parameter_specs(cfg), b = parameter_specs(cfg);
  ASSERT_EQ(a.size(), b.size());
  std::set<std::string> names;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(names.insert(a[i].name).second) << a[i].name;
  }
}

TEST(Model, SameSeedSameWeights) {
  PoseModel a(tiny_config(), 42), b(tiny_config(), 42), c(tiny_config(), 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const Tensor& x = a.parameters()[i].tensor;
    for (std::size_t j = 0; j < x.numel(); ++j) {
      ASSERT_EQ(x.at(j), b.parameters()[i].tensor.at(j));
      differs = differs || x.at(j) != c.parameters()[i].tensor.at(j);
    }
  }
  EXPECT_TRUE(differs);
}
