#include <array>
#include <cstdio>
#include <memory>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "gfv/pipeline.hpp"
#include "gfv/synthetic.hpp"
#include "test_util.hpp"

using namespace gfv;
namespace fs = std::filesystem;

namespace {

struct Cli {
  int status = -1;
  std::string out;
};

// Runs the CLI binary, capturing stdout; stderr is folded in when asked.
Cli run_cli(const std::string& args, bool with_stderr = false) {
  const std::string cmd = std::string("\"") + GFV_CLI_PATH + "\" " + args + (with_stderr ? " 2>&1" : " 2>/dev/null");
  Cli r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int st = pclose(pipe);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

RunConfig small_config(const fs::path& corpus, const fs::path& out) {
  RunConfig cfg;
  cfg.root = corpus;
  cfg.out = out;
  cfg.block_size = 16;
  cfg.resolution = 16;
  cfg.similar_pairs = 6;
  cfg.dissimilar_pairs = 6;
  cfg.train.epochs = 2;
  return cfg;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir();
    SyntheticCorpusSpec spec;
    spec.countries = {"alb", "fin"};
    spec.docs_per_country = 6;
    spec.size = 128;
    make_synthetic_corpus(corpus(), spec);
    RunConfig cfg = small_config(corpus(), run());
    cmd_forge(cfg);
    cfg.root = run();
    cmd_train(cfg);
    cmd_calibrate(cfg);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path corpus() { return dir_->path() / "corpus"; }
  static fs::path run() { return dir_->path() / "run"; }
  static RunConfig run_config(const fs::path& out) {
    RunConfig cfg = small_config(run(), out);
    return cfg;
  }

  static test::TempDir* dir_;
};

test::TempDir* Pipeline::dir_ = nullptr;

}  // namespace

TEST_F(Pipeline, ForgeWritesBalancedManifestAndReport) {
  const Manifest m = read_manifest(run() / "manifest.jsonl");
  long genuine = 0, forged = 0;
  for (const auto& r : m.records) (r.doc_class == DocClass::genuine ? genuine : forged)++;
  EXPECT_EQ(genuine, 12);
  EXPECT_EQ(forged, 12);
  EXPECT_TRUE(fs::exists(run() / "forge_report.json"));
  const auto j = nlohmann::json::parse(test::slurp(run() / "run.json"));
  EXPECT_TRUE(j.contains("forge"));
  EXPECT_TRUE(j.contains("train"));
  EXPECT_TRUE(j.contains("calibrate"));
  EXPECT_EQ(j["train"]["resolution"], 16);
}

TEST_F(Pipeline, ForgeIsIdempotent) {
  test::TempDir other;
  cmd_forge(small_config(corpus(), other.path()));
  EXPECT_EQ(test::slurp(other.path() / "manifest.jsonl"), test::slurp(run() / "manifest.jsonl"));
  EXPECT_EQ(test::slurp(other.path() / "forge_report.json"), test::slurp(run() / "forge_report.json"));
  for (const auto& e : fs::recursive_directory_iterator(run() / "alb" / "forged")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), run());
    EXPECT_EQ(test::slurp(other.path() / rel), test::slurp(e.path())) << rel;
  }
}

TEST_F(Pipeline, CalibrateIsIdempotentAndFilters) {
  const ThresholdTable all = read_thresholds(run() / "thresholds.json");
  ASSERT_EQ(all.entries.size(), 2u);
  EXPECT_EQ(all.entries[0].country, "alb");
  EXPECT_TRUE(fs::exists(run() / "calibration_fin.csv"));

  test::TempDir other;
  RunConfig cfg = run_config(other.path());
  cmd_calibrate(cfg);
  EXPECT_EQ(test::slurp(other.path() / "thresholds.json"), test::slurp(run() / "thresholds.json"));

  test::TempDir only;
  cfg = run_config(only.path());
  cfg.countries = {"fin"};
  const ThresholdTable one = cmd_calibrate(cfg);
  ASSERT_EQ(one.entries.size(), 1u);
  EXPECT_EQ(one.entries[0].country, "fin");

  cfg.countries = {"rus"};
  EXPECT_GFV_ERROR(cmd_calibrate(cfg), UnknownCountry);
}

TEST_F(Pipeline, EvalWritesReport) {
  test::TempDir out;
  RunConfig cfg = run_config(out.path());
  const auto evals = cmd_eval(cfg);
  ASSERT_EQ(evals.size(), 2u);
  const auto rows = read_metrics_csv(out.path() / "metrics.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].country, "fin");
  EXPECT_NEAR(rows[1].tar + rows[1].frr, 1.0, 1e-12);
  EXPECT_TRUE(fs::exists(out.path() / "roc_alb.csv"));
  EXPECT_TRUE(fs::exists(out.path() / "distances_fin.csv"));

  cfg.lambda = 1e9;
  for (const auto& e : cmd_eval(cfg)) {
    EXPECT_EQ(e.metrics.tar, 1.0);
    EXPECT_EQ(e.metrics.far, 1.0);
  }
}

TEST_F(Pipeline, CliVerifyExitCodes) {
  const fs::path ref = corpus() / "fin" / "templates" / "doc_00.png";
  const std::string common = " --thresholds \"" + (run() / "thresholds.json").string() + "\" --checkpoint \"" +
                             (run() / "model.ckpt").string() + "\" --resolution 16";
  const Cli same = run_cli("verify \"" + ref.string() + "\" \"" + ref.string() + "\" --country fin" + common);
  EXPECT_EQ(same.status, 0);
  EXPECT_EQ(same.out.rfind("GENUINE distance=0 ", 0), 0u) << same.out;

  // A threshold of zero rejects everything, including identical images.
  ThresholdTable zero = read_thresholds(run() / "thresholds.json");
  for (auto& e : zero.entries) e.lambda = 0.0;
  test::TempDir tmp;
  write_thresholds(zero, tmp.path() / "zero.json");
  const Cli forged = run_cli("verify \"" + ref.string() + "\" \"" + ref.string() + "\" --country fin --thresholds \"" +
                             (tmp.path() / "zero.json").string() + "\" --checkpoint \"" +
                             (run() / "model.ckpt").string() + "\" --resolution 16");
  EXPECT_EQ(forged.status, 2);
  EXPECT_EQ(forged.out.rfind("FORGED", 0), 0u);

  const Cli unknown = run_cli("verify \"" + ref.string() + "\" \"" + ref.string() + "\" --country rus" + common, true);
  EXPECT_EQ(unknown.status, 1);
  EXPECT_NE(unknown.out.find("\"error\":\"UnknownCountry\""), std::string::npos) << unknown.out;

  const Cli missing = run_cli("verify nothing.png \"" + ref.string() + "\" --country fin" + common, true);
  EXPECT_EQ(missing.status, 1);

  const Cli wrong_arch = run_cli("verify \"" + ref.string() + "\" \"" + ref.string() + "\" --country fin --thresholds \"" +
                                     (run() / "thresholds.json").string() + "\" --checkpoint \"" +
                                     (run() / "model.ckpt").string() + "\" --resolution 24",
                                 true);
  EXPECT_EQ(wrong_arch.status, 1);
  EXPECT_NE(wrong_arch.out.find("FingerprintMismatch"), std::string::npos);
}

TEST_F(Pipeline, CliUsageErrorsExitOne) {
  EXPECT_EQ(run_cli("").status, 1);
  EXPECT_EQ(run_cli("forge --out x").status, 1);
  EXPECT_EQ(run_cli("--help").status, 0);
}

TEST(PipelineCli, ForgeWithWholeImageBlocksReportsNoCandidates) {
  test::TempDir dir;
  SyntheticCorpusSpec spec;
  spec.countries = {"fin"};
  spec.docs_per_country = 2;
  spec.size = 512;
  make_synthetic_corpus(dir.path() / "corpus", spec);
  const Cli r = run_cli("forge --root \"" + (dir.path() / "corpus").string() + "\" --out \"" +
                            (dir.path() / "out").string() + "\" --block-size 512",
                        true);
  EXPECT_EQ(r.status, 0) << r.out;
  const auto rep = nlohmann::json::parse(test::slurp(dir.path() / "out" / "forge_report.json"));
  ASSERT_EQ(rep["entries"].size(), 2u);
  for (const auto& e : rep["entries"]) {
    EXPECT_EQ(e["candidates"], 0);
    EXPECT_EQ(e["skipped"], "NoCandidateZones");
    EXPECT_TRUE(e["forged"].is_null());
  }
}

TEST(PipelineCli, SynthForgeTrainCalibrateEval) {
  test::TempDir dir;
  const std::string c = "\"" + (dir.path() / "corpus").string() + "\"";
  const std::string r = "\"" + (dir.path() / "run").string() + "\"";
  ASSERT_EQ(run_cli("synth --out " + c + " --country alb esp --docs 6 --size 128").status, 0);
  ASSERT_EQ(run_cli("forge --root " + c + " --out " + r + " --block-size 16 --country esp").status, 0);
  const std::string model = " --resolution 16 --pairs 6";
  ASSERT_EQ(run_cli("train --root " + r + " --out " + r + model + " --epochs 1").status, 0);
  ASSERT_EQ(run_cli("calibrate --root " + r + " --out " + r + model).status, 0);
  ASSERT_EQ(run_cli("eval --root " + r + " --out " + r + model).status, 0);
  const auto rows = read_metrics_csv(dir.path() / "run" / "metrics.csv");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].country, "esp");
  EXPECT_EQ(rows[0].X1, 6);

  const Cli bad = run_cli("train --root " + r + " --out " + r + model + " --country rus", true);
  EXPECT_EQ(bad.status, 1);
  EXPECT_NE(bad.out.find("UnknownCountry"), std::string::npos);
}
