#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "askpaint/image_io.hpp"
#include "askpaint/visualize.hpp"
#include "test_util.hpp"

using askpaint::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(ASKPAINT_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) out += buf;
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string toy_config(const fs::path& dir) {
  const nlohmann::json cfg = {
      {"model", {{"height", 8}, {"width", 8}, {"depth", 2}, {"base_width", 2}}},
      {"train", {{"batch_size", 2}, {"learning_rate", 0.001}}},
      {"scene", {{"height", 8}, {"width", 8}, {"min_extent", 2}, {"max_extent", 4}, {"min_shapes", 1}, {"max_shapes", 2}}},
      {"count", 6}};
  const auto path = dir / "toy.json";
  std::ofstream(path) << cfg.dump(2);
  return path.string();
}

int line_count(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST(Cli, TrainEvalRolloutSynth) {
  TempDir dir("cli");
  const auto cfg = toy_config(dir.path());
  const auto train_dir = dir.path() / "train";

  auto r = run("train --config " + cfg + " --steps 10 --out " + train_dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(train_dir / "checkpoint.ckpt"));
  EXPECT_EQ(line_count(train_dir / "loss_log.csv"), 11);
  {
    std::ifstream in(train_dir / "loss_log.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "step,reg_loss,seg_loss,lambda_seg,total,mean_n_hint");
  }

  // The written config snapshot reproduces the run.
  const auto again = dir.path() / "again";
  r = run("train --config " + (train_dir / "config.json").string() + " --out " + again.string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream a(train_dir / "loss_log.csv"), b(again / "loss_log.csv");
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());

  const auto ckpt = (train_dir / "checkpoint.ckpt").string();
  const auto eval_dir = dir.path() / "eval";
  r = run("eval --config " + cfg + " --checkpoint " + ckpt + " --out " + eval_dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream rep(eval_dir / "eval_report.json");
  const auto j = nlohmann::json::parse(rep);
  EXPECT_EQ(j["psnr_by_steps"].size(), 4u);
  EXPECT_EQ(j["weighted_error_by_question"].size(), 3u);
  EXPECT_TRUE(j.contains("global_error_baseline"));
  EXPECT_TRUE(j["class_precision"].contains("mean"));
  EXPECT_EQ(j["run_metadata"]["images"], 6);

  const auto synth_dir = dir.path() / "synth";
  r = run("synth --config " + cfg + " --count 3 --out " + synth_dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(synth_dir / "scene_00002.png"));
  EXPECT_TRUE(fs::exists(synth_dir / "seg" / "scene_00002.png"));

  r = run("eval --config " + cfg + " --checkpoint " + ckpt + " --dataset " + synth_dir.string() + " --out " +
          (dir.path() / "eval2").string());
  ASSERT_EQ(r.code, 0) << r.out;

  const auto roll_dir = dir.path() / "roll";
  r = run("rollout --config " + cfg + " --checkpoint " + ckpt + " --image " + (synth_dir / "scene_00000.png").string() +
          " --answers 2 --out " + roll_dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto montage = askpaint::read_png(roll_dir / "montage.png");
  EXPECT_EQ(askpaint::montage_columns(montage, 8), 3);
}

TEST(Cli, UsageErrorsExitOne) {
  TempDir dir("cli");
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("eval --out " + dir.path().string()).code, 1);
  std::ofstream(dir.path() / "bad.json") << R"({"modle": {}})";
  const auto r = run("train --config " + (dir.path() / "bad.json").string() + " --out " + dir.path().string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("modle"), std::string::npos);
  std::ofstream(dir.path() / "bad2.json") << R"({"train": {"lerning_rate": 1}})";
  EXPECT_EQ(run("train --config " + (dir.path() / "bad2.json").string() + " --out " + dir.path().string()).code, 1);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  TempDir dir("cli");
  std::ofstream(dir.path() / "junk.ckpt") << "not a checkpoint";
  const auto r = run("eval --checkpoint " + (dir.path() / "junk.ckpt").string() + " --out " + dir.path().string());
  EXPECT_EQ(r.code, 2) << r.out;
}
