// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/pipeline.hpp"

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kcircuits_test_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(KCIRCUITS_CLI) + " " + args + " -q 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// One smoke run shared by the tests that only read it.
const fs::path& smoke_run() {
  static const fs::path dir = [] {
    const fs::path d = scratch("smoke");
    fs::create_directories(d);
    write(d.parent_path() / "kcircuits_test_pipeline_smoke.json", R"({"preset": "smoke"})");
    const int code = cli("run-all --config " + (d.parent_path() / "kcircuits_test_pipeline_smoke.json").string() +
                         " --out " + d.string());
    EXPECT_EQ(code, 0);
    return d;
  }();
  return dir;
}

TEST(Pipeline, SmokeRunAllWritesEveryArtifact) {
  const fs::path& d = smoke_run();
  for (const char* f : {"config.json", "manifest.json", "vocab.txt", "metrics.csv", "phase_shift.json", "aligned.csv",
                        "lens.csv", "heads.csv", "transfer.csv", "forget.csv", "calibration.json",
                        "report/hit_at_10.svg", "report/entropy.svg", "report/forget_jaccard.svg"}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
  for (kc::Stage s : kc::kAllStages) EXPECT_TRUE(fs::exists(d / "stamps" / (kc::stage_name(s) + ".json")));
  const auto cfg = kc::ExperimentConfig::preset("smoke");
  EXPECT_TRUE(fs::exists(d / kc::Pipeline::checkpoint_path("continual", cfg.continual.epochs)));
  // Text artifacts carry the provenance line.
  const std::string metrics = slurp(d / "metrics.csv");
  EXPECT_EQ(metrics.rfind("# kcircuits ", 0), 0u);
  EXPECT_NE(metrics.find("config=" + cfg.hash()), std::string::npos);
  const auto table = kc::read_csv_file(d / "metrics.csv");
  EXPECT_EQ(table.rows.size(), (cfg.continual.epochs + 1) * cfg.analysis.filters.size());
}

TEST(Pipeline, MissingPrerequisiteExitsThree) {
  const fs::path d = scratch("missing");
  EXPECT_EQ(cli("discover --out " + d.string()), 3);
  EXPECT_EQ(cli("report --out " + d.string()), 3);
}

TEST(Pipeline, StaleHashIsRefusedUnlessOverridden) {
  const fs::path& d = smoke_run();
  // A seed override changes the hash of the directory's config.
  EXPECT_EQ(cli("analyze --seed 12345 --out " + d.string()), 2);
  EXPECT_EQ(cli("synth --seed 12345 --out " + d.string()), 2);
  // Same config: analyze reruns over the existing artifacts.
  EXPECT_EQ(cli("analyze --out " + d.string()), 0);
}

TEST(Pipeline, BadConfigExitsTwo) {
  const fs::path d = scratch("badcfg");
  fs::create_directories(d);
  write(d / "bad.json", R"({"preset": "smoke", "model": {"n_layers": -1}})");
  EXPECT_EQ(cli("synth --config " + (d / "bad.json").string() + " --out " + d.string()), 2);
  write(d / "typo.json", R"({"preset": "smoke", "modle": {}})");
  EXPECT_EQ(cli("synth --config " + (d / "typo.json").string() + " --out " + d.string()), 2);
  EXPECT_EQ(cli("no-such-stage"), 2);
}

TEST(Pipeline, SecondPipelineOnSameDirectoryIsLocked) {
  const fs::path d = scratch("lock");
  kc::PipelineOptions o;
  o.dir = d;
  kc::Pipeline first(kc::ExperimentConfig::preset("smoke"), o);
  EXPECT_THROW(kc::Pipeline(kc::ExperimentConfig::preset("smoke"), o), kc::RunLocked);
}

TEST(Pipeline, ReportWithSingleContinualEpoch) {
  const fs::path d = scratch("single");
  fs::create_directories(d);
  write(d / "one.json", R"({"preset": "smoke", "name": "one", "train": {"continual": {"epochs": 1}, "forget": {"epochs": 1}}})");
  ASSERT_EQ(cli("run-all --config " + (d / "one.json").string() + " --out " + (d / "run").string()), 0);
  const std::string svg = slurp(d / "run" / "report" / "entropy.svg");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  // Two points (epochs 0 and 1) are too few for a phase-shift fit.
  EXPECT_NE(slurp(d / "run" / "phase_shift.json").find("\"detected\": false"), std::string::npos);
}

TEST(Csv, ParsesCommentsAndInfinity) {
  std::istringstream in("# kcircuits 0.1.0 config=abc\n# version=1\nfilter,value\nK_rel,0.5\nK_compl,inf\n");
  const auto t = kc::read_csv(in);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.text(0, "filter"), "K_rel");
  EXPECT_DOUBLE_EQ(t.number(0, "value"), 0.5);
  EXPECT_TRUE(std::isinf(t.number(1, "value")));
  EXPECT_THROW(t.column("missing"), std::out_of_range);
}

}  // namespace
