// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment stages over a run directory. Each stage reads what earlier
// stages wrote, checks their stamps against the current config hash, and
// writes its own artifacts plus a stamp.
//
//   config.json                      the resolved config
//   stamps/<stage>.json              config hash and version per finished stage
//   corpus/{base,continual,forget}.txt, corpus/*_entities.tsv, vocab.txt
//   tasks/<filter>.{validation,test}.jsonl
//   checkpoints/<stage>/epoch_NN.ckpt, loss_<stage>.csv
//   scores/epoch_NN/<filter>.tsv, circuits/epoch_NN/<filter>.tsv, calibration.json
//   metrics.csv, phase_shift.json, aligned.csv
//   lens.csv, heads.csv, transfer.csv, forget.csv, forget/r<ratio>/epoch_NN.tsv
//   report/*.svg

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kcircuits/experiment.hpp"

namespace kc {

enum class Stage { Synth, Train, Discover, Analyze, Lens, Heads, Transfer, Forget, Report };
inline constexpr Stage kAllStages[] = {Stage::Synth,   Stage::Train,    Stage::Discover,
                                       Stage::Analyze, Stage::Lens,     Stage::Heads,
                                       Stage::Transfer, Stage::Forget,  Stage::Report};
std::string stage_name(Stage stage);
std::optional<Stage> parse_stage(std::string_view name);

/// A prerequisite artifact is absent.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An earlier stage ran under a different config hash.
class StaleArtifact : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Another process holds the run directory's lock.
class RunLocked : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineOptions {
  std::filesystem::path dir;
  std::filesystem::path data_dir;
  /// Accept earlier stages' artifacts even when their config hash differs.
  bool stage_override = false;
  std::ostream* log = nullptr;  // progress lines; null for silence
};

/// Config for a run directory: `config_file` if given, else the directory's
/// config.json, else the desk preset. A seed override applies last.
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& config_file,
                                const std::filesystem::path& dir, std::optional<std::uint64_t> seed);

class Pipeline {
 public:
  /// Creates the directory and takes its lock. Throws RunLocked.
  Pipeline(ExperimentConfig config, PipelineOptions options);
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  void run(Stage stage);
  void run_all();

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& dir() const { return options_.dir; }

  /// Relative paths used by the stages.
  static std::string epoch_dir(std::size_t epoch);
  static std::string checkpoint_path(const std::string& stage, std::size_t epoch);
  static std::string ratio_tag(double ratio);

 private:
  void synth();
  void train();
  void discover();
  void analyze();
  void lens();
  void heads();
  void transfer();
  void forget();
  void report();

  void require(Stage stage) const;
  void stamp(Stage stage) const;
  void log(const std::string& line) const;

  ExperimentConfig config_;
  PipelineOptions options_;
  int lock_fd_ = -1;
};

/// First line of every text artifact: "# kcircuits <version> config=<hash>".
std::string provenance_line(const ExperimentConfig& config);

/// Comma-separated table with '#' comment lines, as the stages write them.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;  // throws std::out_of_range
  double number(std::size_t row, const std::string& name) const;
  const std::string& text(std::size_t row, const std::string& name) const;
};
CsvTable read_csv(std::istream& is);
CsvTable read_csv_file(const std::filesystem::path& path);

}  // namespace kc
