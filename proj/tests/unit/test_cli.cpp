#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "restoredet/cli.hpp"
#include "restoredet/evaluation.hpp"
#include "restoredet/image_io.hpp"
#include "restoredet/kv_config.hpp"
#include "restoredet/scene.hpp"
#include "test_util.hpp"

namespace restoredet {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "restoredet");
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

int count_files(const fs::path& dir, const std::string& ext) {
  int n = 0;
  if (!fs::exists(dir)) return 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

const std::vector<std::string> kTinyModel{"--stage-widths", "2,4,8,16", "--upscale-widths", "8,4,4",
                                          "--head-width",   "4",        "--dt-hidden",      "8",
                                          "--arrd-width",   "4"};

TEST(Cli, HelpListsAllSubcommands) {
  const Result r = run({"--help"});
  EXPECT_EQ(r.code, cli::kExitOk);
  for (const char* cmd : {"synth", "degrade", "train", "eval", "infer", "report"}) {
    EXPECT_NE(r.out.find(cmd), std::string::npos) << cmd;
  }
  EXPECT_NE(r.out.find(cli::kOutputDirEnv), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  testing::TempDir dir("cliusage");
  EXPECT_EQ(run({}).code, cli::kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"synth", "--bogus", "1", "--out", dir.path().string()}).code, cli::kExitUsage);
  EXPECT_EQ(run({"degrade", "--out", dir.path().string()}).code, cli::kExitUsage);  // --input missing
}

TEST(Cli, SynthWritesScenesAndManifest) {
  testing::TempDir dir("clisynth");
  const fs::path out = dir.path() / "d";
  const Result r = run({"synth", "--count", "10", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(out / "images", ".png"), 10);
  EXPECT_EQ(count_files(out / "annotations", ".json"), 10);
  EXPECT_TRUE(fs::exists(out / kManifestFile));
  const KeyValueConfig m = KeyValueConfig::load(out / cli::kRunManifest);
  EXPECT_EQ(m.get("command"), "synth");
  EXPECT_EQ(m.get("code_version"), cli::code_version());
  EXPECT_EQ(m.get("count"), "10");
  EXPECT_EQ(m.get("background"), "gradient");
}

TEST(Cli, RunIsReproducibleFromItsManifest) {
  testing::TempDir dir("clirepro");
  ASSERT_EQ(run({"synth", "--count", "3", "--seed", "12", "--background", "textured", "--out",
                 (dir.path() / "a").string()}).code, 0);
  ASSERT_EQ(run({"synth", "--config", (dir.path() / "a" / cli::kRunManifest).string(), "--out",
                 (dir.path() / "b").string()}).code, 0);
  const auto ma = read_manifest(dir.path() / "a"), mb = read_manifest(dir.path() / "b");
  ASSERT_EQ(ma.entries.size(), 6u);
  for (std::size_t i = 0; i < ma.entries.size(); ++i) EXPECT_EQ(ma.entries[i].sha256, mb.entries[i].sha256);
}

TEST(Cli, FlagsOverrideConfigFileOverridesDefaults) {
  testing::TempDir dir("cliprec");
  const fs::path cfg = dir.path() / "synth.cfg";
  std::ofstream(cfg) << "count = 3\nmax_objects = 2\n";
  ASSERT_EQ(run({"synth", "--config", cfg.string(), "--count", "5", "--out", (dir.path() / "o").string()}).code, 0);
  const KeyValueConfig m = KeyValueConfig::load(dir.path() / "o" / cli::kRunManifest);
  EXPECT_EQ(m.get("count"), "5");
  EXPECT_EQ(m.get("max_objects"), "2");
  EXPECT_EQ(m.get("min_objects"), "1");
  EXPECT_EQ(count_files(dir.path() / "o" / "images", ".png"), 5);
}

TEST(Cli, UnknownConfigKeyOrForeignManifestIsRejected) {
  testing::TempDir dir("clibadcfg");
  const fs::path cfg = dir.path() / "bad.cfg";
  std::ofstream(cfg) << "cuont = 3\n";
  EXPECT_EQ(run({"synth", "--config", cfg.string(), "--out", (dir.path() / "o").string()}).code, cli::kExitUsage);
  const fs::path foreign = dir.path() / "foreign.cfg";
  std::ofstream(foreign) << "command = train\n";
  EXPECT_EQ(run({"synth", "--config", foreign.string(), "--out", (dir.path() / "o").string()}).code, cli::kExitUsage);
  EXPECT_FALSE(fs::exists(dir.path() / "o" / cli::kRunManifest));
}

TEST(Cli, OutputDirectoryFallsBackToEnvironment) {
  testing::TempDir dir("clienv");
  ::unsetenv(cli::kOutputDirEnv);
  EXPECT_EQ(run({"synth", "--count", "1"}).code, cli::kExitUsage);
  ::setenv(cli::kOutputDirEnv, dir.path().c_str(), 1);
  const Result r = run({"synth", "--count", "1"});
  ::unsetenv(cli::kOutputDirEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir.path() / "synth" / kManifestFile));
}

TEST(Cli, TrainWithoutDatasetFailsWithoutCheckpoint) {
  testing::TempDir dir("clinodata");
  const fs::path out = dir.path() / "run";
  const Result r = run({"train", "--data", (dir.path() / "missing").string(), "--out", out.string()});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_FALSE(r.err.empty());
  EXPECT_FALSE(fs::exists(out / "final.ckpt"));
  EXPECT_FALSE(fs::exists(out / "latest.ckpt"));
}

TEST(Cli, InvalidTrainValueIsConfigError) {
  testing::TempDir dir("clibadval");
  EXPECT_EQ(run({"train", "--data", dir.path().string(), "--dt-stage", "7", "--out", (dir.path() / "r").string()}).code,
            cli::kExitUsage);
  EXPECT_EQ(run({"train", "--data", dir.path().string(), "--epochs", "many", "--out", (dir.path() / "r").string()}).code,
            cli::kExitUsage);
}

TEST(Cli, DegradeFixedIdentityReproducesInput) {
  testing::TempDir dir("clidegrade");
  Rng rng = make_rng(60, 0);
  ImageTensor img = testing::random_image(rng, 64, 64);
  for (auto& v : img.values()) v = std::round(v * 255.0f) / 255.0f;
  write_png(dir.path() / "in.png", img);
  const Result r = run({"degrade", "--input", (dir.path() / "in.png").string(), "--mode", "fixed", "--out",
                     (dir.path() / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_png(dir.path() / "o" / "degraded.png"), read_png(dir.path() / "in.png"));
  const KeyValueConfig p = KeyValueConfig::load(dir.path() / "o" / "params.cfg");
  EXPECT_EQ(p.get("output_height"), "64");
  EXPECT_EQ(p.get("kernel_type"), "none");

  const Result rr = run({"degrade", "--input", (dir.path() / "in.png").string(), "--mode", "fixed", "--kernel-type",
                      "anisotropic", "--kernel-size", "9", "--width-major", "3", "--width-minor", "1", "--scale", "2",
                      "--noise-sigma", "0.02", "--out", (dir.path() / "o2").string()});
  ASSERT_EQ(rr.code, 0) << rr.err;
  EXPECT_EQ(read_png(dir.path() / "o2" / "degraded.png").height(), 32);
  EXPECT_TRUE(fs::exists(dir.path() / "o2" / "kernel.txt"));

  EXPECT_EQ(run({"degrade", "--input", (dir.path() / "in.png").string(), "--mode", "fixed", "--kernel-type",
                 "isotropic", "--kernel-size", "8", "--width-major", "1", "--width-minor", "1", "--out",
                 (dir.path() / "o3").string()}).code,
            cli::kExitRuntime);
}

TEST(Cli, TrainEvalInferReportEndToEnd) {
  testing::TempDir dir("clie2e");
  const fs::path data = dir.path() / "data";
  ASSERT_EQ(run({"synth", "--count", "4", "--split", "train", "--out", (data / "train").string()}).code, 0);
  ASSERT_EQ(run({"synth", "--count", "3", "--split", "test", "--out", (data / "test").string()}).code, 0);

  std::vector<std::string> train{"train", "--data", data.string(), "--epochs", "1", "--batch-size", "2",
                                 "--eval-every", "1", "--out", (dir.path() / "run").string()};
  train.insert(train.end(), kTinyModel.begin(), kTinyModel.end());
  const Result t = run(train);
  ASSERT_EQ(t.code, 0) << t.err;
  const fs::path ckpt = dir.path() / "run" / "final.ckpt";
  ASSERT_TRUE(fs::exists(ckpt));
  EXPECT_TRUE(fs::exists(dir.path() / "run" / "history.jsonl"));
  const KeyValueConfig tm = KeyValueConfig::load(dir.path() / "run" / cli::kRunManifest);
  EXPECT_EQ(tm.get("stage_widths"), "2,4,8,16");
  EXPECT_EQ(tm.get("decay_milestones"), "");  // 0.72 and 0.9 of one epoch both round outside (0, 1)

  const Result e = run({"eval", "--checkpoint", ckpt.string(), "--data", data.string(), "--protocols", "random,down4",
                     "--fps", "false", "--artifacts", "1", "--out", (dir.path() / "eval").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto reports = read_reports(dir.path() / "eval" / "benchmark.jsonl");
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0].label, "restoredet/N+L");
  EXPECT_EQ(reports[1].protocol, "down4");
  EXPECT_TRUE(fs::exists(dir.path() / "eval" / "benchmark.txt"));

  const Result i = run({"infer", "--checkpoint", ckpt.string(), "--input",
                     (data / "test" / "images" / "scene_000000.png").string(), "--out", (dir.path() / "inf").string()});
  ASSERT_EQ(i.code, 0) << i.err;
  EXPECT_TRUE(fs::exists(dir.path() / "inf" / "detections.jsonl"));
  EXPECT_TRUE(fs::exists(dir.path() / "inf" / "scene_000000_detections.png"));
  const Result idir = run({"infer", "--checkpoint", ckpt.string(), "--input", (data / "test" / "images").string(),
                           "--out", (dir.path() / "infdir").string()});
  ASSERT_EQ(idir.code, 0) << idir.err;
  EXPECT_EQ(count_files(dir.path() / "infdir", ".png"), 3);

  const Result rep = run({"report", "--inputs", (dir.path() / "eval").string() + "," +
                                                 (dir.path() / "eval" / "benchmark.jsonl").string(),
                       "--out", (dir.path() / "rep").string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(read_reports(dir.path() / "rep" / "report.jsonl").size(), 4u);
  EXPECT_TRUE(fs::exists(dir.path() / "rep" / "report.txt"));

  EXPECT_EQ(run({"eval", "--checkpoint", (dir.path() / "nope.ckpt").string(), "--data", data.string(), "--out",
                 (dir.path() / "eval2").string()}).code,
            cli::kExitRuntime);
}

}  // namespace
}  // namespace restoredet
