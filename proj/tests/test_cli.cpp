#include <gtest/gtest.h>

#ifdef DUALMOD_HAVE_CLI

#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "cli.hpp"

namespace fs = std::filesystem;
using dualmod::cli::run;

namespace {

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "dualmod");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dualmod_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const std::vector<std::string> kTiny = {
    "--set", "synthetic.count=6",      "--set", "synthetic.shape=8",       "--set", "data.test_count=2",
    "--set", "data.patch_shape=8",     "--set", "network.base_channels=2", "--set", "network.num_stages=2",
    "--set", "trainer.batch_size=2",   "--set", "trainer.labeled_per_batch=1"};

std::vector<std::string> with_tiny(std::vector<std::string> head) {
  head.insert(head.end(), kTiny.begin(), kTiny.end());
  return head;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(invoke({}), dualmod::cli::kConfigError);
  EXPECT_EQ(invoke({"--help"}), dualmod::cli::kOk);
  EXPECT_EQ(invoke({"frobnicate"}), dualmod::cli::kConfigError);
  EXPECT_EQ(invoke({"eval"}), dualmod::cli::kConfigError);
  const auto out = scratch("bad_key");
  EXPECT_EQ(invoke({"train", "--out", out.string(), "--set", "network.width=3"}), dualmod::cli::kConfigError);
  EXPECT_EQ(invoke({"train", "--config", "/nonexistent/x.cfg"}), dualmod::cli::kConfigError);
  fs::remove_all(out);
}

TEST(Cli, TrainEvalAndResume) {
  const auto out = scratch("train");
  ASSERT_EQ(invoke(with_tiny({"train", "--out", out.string(), "--set", "trainer.max_iters=1"})), dualmod::cli::kOk);
  const auto log = lines(out / "log.csv");
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log[0], "iter,lr,ce_a,ce_b,dice_a,dice_b,consistency,total");
  EXPECT_EQ(log[1].rfind("0,0.01,", 0), 0u) << log[1];
  for (const char* f : {"config.cfg", "bundle.json", "log.jsonl", "latest.ckpt", "loss_curve.png", "metrics_test.csv",
                        "metrics_test_a.csv", "metrics_test_b.csv", "metrics_test.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;

  std::ifstream bundle(out / "bundle.json");
  const auto j = nlohmann::json::parse(bundle);
  EXPECT_EQ(j["command"], "train");
  EXPECT_TRUE(j.contains("config_hash"));

  const auto metrics = lines(out / "metrics_test.csv");
  ASSERT_GE(metrics.size(), 3u);
  EXPECT_EQ(metrics[0].rfind("id,", 0), 0u) << metrics[0];

  const auto ev = scratch("eval");
  ASSERT_EQ(invoke({"eval", "--checkpoint", (out / "latest.ckpt").string(), "--out", ev.string()}), dualmod::cli::kOk);
  EXPECT_EQ(lines(ev / "metrics.csv"), metrics);

  const auto resumed = scratch("resume");
  EXPECT_EQ(invoke({"train", "--resume", (out / "latest.ckpt").string(), "--out", resumed.string(), "--set",
                    "losses.alpha=0"}),
            dualmod::cli::kConfigError);
  ASSERT_EQ(invoke({"train", "--resume", (out / "latest.ckpt").string(), "--out", resumed.string(), "--set",
                    "trainer.max_iters=2"}),
            dualmod::cli::kOk);
  const auto more = lines(resumed / "log.csv");
  ASSERT_EQ(more.size(), 1u);
  EXPECT_EQ(more[0].rfind("1,", 0), 0u);
  for (const auto& p : {out, ev, resumed}) fs::remove_all(p);
}

TEST(Cli, SynthThenEvalOnManifest) {
  const auto data = scratch("synth");
  ASSERT_EQ(invoke(with_tiny({"synth", "--out", data.string()})), dualmod::cli::kOk);
  EXPECT_EQ(lines(data / "manifest.tsv").size(), 6u);

  const auto run_dir = scratch("synth_train");
  ASSERT_EQ(invoke(with_tiny({"train", "--out", run_dir.string(), "--set", "trainer.max_iters=1", "--set",
                              "data.manifest=" + (data / "manifest.tsv").string()})),
            dualmod::cli::kOk);
  const auto ev = scratch("synth_eval");
  ASSERT_EQ(invoke({"eval", "--checkpoint", (run_dir / "latest.ckpt").string(), "--manifest",
                    (data / "manifest.tsv").string(), "--out", ev.string()}),
            dualmod::cli::kOk);
  // header, six samples and the summary line
  EXPECT_EQ(lines(ev / "metrics.csv").size(), 8u);
  for (const auto& p : {data, run_dir, ev}) fs::remove_all(p);
}

TEST(Cli, CheckGradExitCodes) {
  const auto out = scratch("grad");
  const std::vector<std::string> base = {"check-grad", "--out", out.string(), "--set", "network.num_stages=2",
                                         "--set", "network.base_channels=2", "--set", "check_grad.entries_per_tensor=2"};
  EXPECT_EQ(invoke(base), dualmod::cli::kOk);
  EXPECT_NE(lines(out / "check_grad.txt").back().find("PASS"), std::string::npos);
  auto strict = base;
  strict.insert(strict.end(), {"--set", "check_grad.tolerance=1e-300"});
  EXPECT_EQ(invoke(strict), dualmod::cli::kGradCheckFailed);
  fs::remove_all(out);
}

#endif
