// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// kcircuits: run experiment stages over a run directory.
//
//   kcircuits synth|train|discover|analyze|lens|heads|transfer|forget|report|run-all
//             [--config PATH] [--out DIR] [--seed N] [--stage-override] [--jobs N]
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 missing
// prerequisite, 4 numerical failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kcircuits/pipeline.hpp"
#include "kcircuits/runtime.hpp"

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumerical = 4;

}  // namespace

int main(int argc, char** argv) {
  kc::prepare_process(argv);

  CLI::App app{"Knowledge-circuit experiments on tiny transformers"};
  app.require_subcommand(1, 1);
  app.fallthrough();  // global options may follow the subcommand
  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  std::size_t jobs = 0;
  bool stage_override = false;
  bool quiet = false;
  app.add_option("--config", config_path, "experiment config (JSON); defaults to the run directory's config.json, "
                                          "then the desk preset");
  app.add_option("--out", out_dir, "run directory (default: $KCIRCUITS_OUT/<config name>, or runs/<config name>)");
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  app.add_option("--jobs", jobs, "worker threads for attribution and evaluation")->check(CLI::PositiveNumber);
  app.add_flag("--stage-override", stage_override, "accept earlier artifacts made under a different config hash");
  app.add_flag("-q,--quiet", quiet, "no progress lines");

  for (kc::Stage s : kc::kAllStages) app.add_subcommand(kc::stage_name(s), "run the " + kc::stage_name(s) + " stage");
  app.add_subcommand("run-all", "run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    std::optional<std::filesystem::path> cfg_file;
    if (!config_path.empty()) cfg_file = config_path;
    std::optional<std::uint64_t> seed_override;
    if (seed_opt->count() > 0) seed_override = seed;

    std::filesystem::path dir = out_dir;
    if (dir.empty()) {
      // The directory is named after the config, so resolve that first.
      const auto probe = kc::resolve_config(cfg_file, "", seed_override);
      const char* root = std::getenv("KCIRCUITS_OUT");
      dir = std::filesystem::path(root && *root ? root : "runs") / probe.name;
    }
    kc::ExperimentConfig config = kc::resolve_config(cfg_file, dir, seed_override);
    if (jobs > 0) config.jobs = jobs;

    kc::PipelineOptions opts;
    opts.dir = dir;
    opts.stage_override = stage_override;
    opts.log = quiet ? nullptr : &std::cerr;
    kc::Pipeline pipeline(config, opts);
    if (!quiet) std::cerr << "[kcircuits] run directory " << dir.string() << ", config " << config.hash() << "\n";
    if (command == "run-all") {
      pipeline.run_all();
    } else {
      pipeline.run(*kc::parse_stage(command));
    }
    return 0;
  } catch (const kc::ConfigError& e) {
    std::cerr << "kcircuits: " << e.what() << "\n";
    return kExitConfig;
  } catch (const kc::MissingPrerequisite& e) {
    std::cerr << "kcircuits: " << e.what() << "\n";
    return kExitMissing;
  } catch (const kc::NumericalError& e) {
    std::cerr << "kcircuits: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "kcircuits: " << e.what() << "\n";
    return kExitOther;
  }
}
