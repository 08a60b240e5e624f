#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "json.hpp"
#include "vitpose/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(VITPOSE_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("vitpose_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {(std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()};
}

// Relative path and content of every file, in sorted order.
std::string tree_digest(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    for (unsigned char c : f.string() + "\n" + slurp(root / f)) h = (h ^ c) * 0x100000001b3ULL;
  }
  return std::to_string(files.size()) + ":" + std::to_string(h);
}

fs::path tiny_config(const fs::path& dir, std::size_t steps = 12) {
  const json cfg = {
      {"model", {{"backbone", {{"name", "tiny_desk"}}}, {"decoder", {{"kind", "classic"}, {"deconv_channels", 32}}}}},
      {"train",
       {{"base_lr", 1e-3}, {"weight_decay", 1e-4}, {"layer_wise_decay", 1.0}, {"max_steps", steps}, {"batch_size", 4},
        {"lr_drop_epochs", json::array()}}},
      {"data", {{"num_images", 8}}}};
  std::ofstream(dir / "tiny.json") << cfg.dump();
  return dir / "tiny.json";
}

}  // namespace

TEST(Cli, StatsReportsVitBaseCost) {
  const Result r = run("stats --model vit_b --input 256x192");
  ASSERT_EQ(r.code, 0);
  const json j = json::parse(r.out);
  EXPECT_NEAR(j["gflops"].get<double>(), 17.1, 0.05 * 17.1);
  EXPECT_EQ(j["config_digest"].get<std::string>().size(), 16u);
}

TEST(Cli, HelpForEverySubcommand) {
  EXPECT_EQ(run("--help").code, 0);
  for (const char* sub : {"train", "pretrain", "eval", "distill", "merge", "stats", "synth", "dump-heatmaps"}) {
    EXPECT_EQ(run(std::string(sub) + " --help").code, 0) << sub;
  }
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("stats --bogus").code, 2);
  EXPECT_EQ(run("stats --input 256by192").code, 2);
  EXPECT_EQ(run("train --override model.backbone.no_such_field=3").code, 2);
  EXPECT_EQ(run("train --override missing_equals").code, 2);
  const fs::path dir = scratch("codes");
  std::ofstream(dir / "junk.vpck") << "not a checkpoint";
  EXPECT_EQ(run("merge --checkpoint " + (dir / "junk.vpck").string() + " --out " + dir.string()).code, 1);
}

TEST(Cli, OverridesChangeTheDigest) {
  const json a = json::parse(run("stats --model tiny_desk --input 32x24").out);
  const json b = json::parse(run("stats --model tiny_desk --input 32x24 --override moe.partition_ratio=0.5").out);
  EXPECT_NE(a["config_digest"], b["config_digest"]);
}

TEST(Cli, PresetScalesTheLearningRate) {
  const fs::path dir = scratch("preset");
  const fs::path cfg = tiny_config(dir, 1);
  ASSERT_EQ(run("train --config " + cfg.string() + " --preset --override backbone.name=vit_s --override backbone.depth=1"
                " --override backbone.dim=12 --override backbone.heads=2 --override backbone.patch_size=4"
                " --override backbone.stride=4 --override backbone.input_hw=[32,24] --out " + (dir / "a").string())
                .code,
            0);
  const json doc = json::parse(slurp(dir / "a" / "config.json"));
  EXPECT_DOUBLE_EQ(doc["train"]["base_lr"].get<double>(), 5e-4 * 4 / 512);
  EXPECT_EQ(doc["train"]["layer_wise_decay"].get<double>(), 0.80);
  // An explicit override beats the preset.
  ASSERT_EQ(run("train --config " + cfg.string() + " --preset --override backbone.name=vit_s --override backbone.depth=1"
                " --override backbone.dim=12 --override backbone.heads=2 --override backbone.patch_size=4"
                " --override backbone.stride=4 --override backbone.input_hw=[32,24] --override train.base_lr=0.01"
                " --out " + (dir / "b").string())
                .code,
            0);
  EXPECT_EQ(json::parse(slurp(dir / "b" / "config.json"))["train"]["base_lr"].get<double>(), 0.01);
  EXPECT_EQ(run("train --config " + cfg.string() + " --preset --out " + (dir / "c").string()).code, 2);
}

TEST(Cli, SynthIsDeterministic) {
  const fs::path dir = scratch("synth");
  for (const char* name : {"a", "b"}) {
    ASSERT_EQ(run("synth --images 64 --seed 7 --out " + (dir / name).string()).code, 0);
  }
  EXPECT_EQ(tree_digest(dir / "a"), tree_digest(dir / "b"));
  EXPECT_TRUE(fs::exists(dir / "a" / "annotations.json"));
  ASSERT_EQ(run("synth --images 64 --seed 8 --out " + (dir / "c").string()).code, 0);
  EXPECT_NE(tree_digest(dir / "a"), tree_digest(dir / "c"));
}

TEST(Cli, EvalOfAnnotationsAgainstThemselves) {
  const fs::path dir = scratch("eval");
  ASSERT_EQ(run("synth --images 10 --persons 1-3 --seed 2 --out " + (dir / "d").string()).code, 0);
  const std::string ann = (dir / "d" / "annotations.json").string();
  const Result r = run("eval --annotations " + ann + " --predictions " + ann + " --spec " + (dir / "d" / "spec.json").string() +
                       " --out " + dir.string());
  ASSERT_EQ(r.code, 0);
  const json j = json::parse(r.out);
  EXPECT_EQ(j["ap"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(dir / "eval_report.json"));
}

TEST(Cli, TrainIsReproducible) {
  const fs::path dir = scratch("train");
  const fs::path cfg = tiny_config(dir);
  for (const char* name : {"a", "b"}) {
    ASSERT_EQ(run("train --config " + cfg.string() + " --seed 4 --out " + (dir / name).string()).code, 0);
  }
  const std::string trace = slurp(dir / "a" / "loss_trace.csv");
  EXPECT_EQ(trace.substr(0, trace.find('\n')), "step,loss");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 13);
  EXPECT_EQ(trace, slurp(dir / "b" / "loss_trace.csv"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoints" / "final.vpck"), slurp(dir / "b" / "checkpoints" / "final.vpck"));
  const json rep = json::parse(slurp(dir / "a" / "train_report.json"));
  const json cfg_doc = json::parse(slurp(dir / "a" / "config.json"));
  EXPECT_EQ(rep["config_digest"], vitpose::config_digest(cfg_doc));
  // The checkpoint's recorded model is usable on its own.
  EXPECT_NO_THROW(vitpose::load_checkpoint((dir / "a" / "checkpoints" / "final.vpck").string()));
}

TEST(Cli, MergeAndDump) {
  const fs::path dir = scratch("merge");
  const fs::path cfg = tiny_config(dir, 4);
  ASSERT_EQ(run("train --config " + cfg.string() + " --out " + (dir / "t").string() +
                " --override moe.mode=ps_ffn --override 'tasks=[{\"name\":\"coco\",\"num_keypoints\":17},"
                "{\"name\":\"hand\",\"num_keypoints\":5}]'")
                .code,
            0);
  const std::string ckpt = (dir / "t" / "checkpoints" / "final.vpck").string();
  const Result m = run("merge --checkpoint " + ckpt + " --task hand --out " + dir.string());
  ASSERT_EQ(m.code, 0);
  const json rep = json::parse(m.out);
  EXPECT_LT(rep["max_rel_diff"].get<double>(), 1e-6);
  EXPECT_LT(rep["params_after"].get<std::size_t>(), rep["params_before"].get<std::size_t>());
  const auto merged = vitpose::load_checkpoint((dir / "merged_hand.vpck").string());
  EXPECT_EQ(merged.model.config().tasks.size(), 1u);
  EXPECT_EQ(merged.model.config().tasks[0].num_keypoints, 5u);

  ASSERT_EQ(run("dump-heatmaps --config " + cfg.string() + " --checkpoint " + ckpt + " --count 2 --out " + dir.string()).code, 0);
  const auto c = vitpose::load_tensors((dir / "heatmaps.vpck").string());
  ASSERT_EQ(c.tensors.size(), 4u);
  EXPECT_EQ(c.tensors[1].name, "sample_0/heatmaps");
  EXPECT_EQ(c.tensors[1].tensor.shape(), (vitpose::Shape{17, 32, 24}));
}
