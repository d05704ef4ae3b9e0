// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and the deterministic datasets built from it:
// a base corpus, a continual corpus with relevant (K_rel) and completely new
// (K_compl) entities, a forgetting corpus of fresh entities, the shared
// vocabulary and the factual-recall task sets.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "kcircuits/corpus.hpp"
#include "kcircuits/model_config.hpp"
#include "kcircuits/training.hpp"

namespace kc {

struct CorpusConfig {
  std::size_t entities = 500;  // continual-stage entities
  std::size_t relevant_parts = 1;
  std::size_t new_parts = 4;
  /// Base-stage entities that never return; they carry all five relations.
  std::size_t base_filler = 250;
  /// Appearances of each future K_rel entity in the base corpus.
  int anchor_frequency = 8;
  std::size_t forget_entities = 250;
  std::size_t templates_per_relation = 10;
  double frequency_scale = 2.69;
  int frequency_min = 1;
  int frequency_max = 27;
  /// Validation and test examples per task filter.
  std::size_t task_examples = 100;
};

struct DiscoveryConfig {
  std::size_t steps = 5;        // m
  std::size_t edge_budget = 0;  // 0: calibrate on the final checkpoint
  double calibration_target = 0.70;
  std::size_t examples = 64;    // validation examples scored per checkpoint
};

struct AnalysisConfig {
  std::vector<std::string> filters = {"K_rel", "K_compl", "low", "medium", "high"};
  std::vector<std::string> relations = {"city", "major", "company"};
  /// Filter whose circuits drive calibration, phase-shift and forgetting.
  std::string primary_filter = "K_compl";
  std::vector<double> replay_ratios = {0.0, 0.25, 0.5};
};

struct ExperimentConfig {
  std::string name = "desk";
  std::uint64_t seed = 0;
  ModelConfig model;  // vocab_size is filled in from the built vocabulary
  CorpusConfig corpus;
  TrainConfig base;
  TrainConfig continual;
  TrainConfig forget;
  DiscoveryConfig discovery;
  AnalysisConfig analysis;
  std::size_t jobs = 1;

  /// desk, smoke or gpt2-small. Throws ConfigError for other names.
  static ExperimentConfig preset(std::string_view name);
  /// Keys absent from `text` keep the values of the preset named by its
  /// "preset" key (desk by default). Unknown keys throw ConfigError.
  static ExperimentConfig from_json_text(std::string_view text);
  std::string to_json_text() const;

  /// Throws ConfigError on the first violated constraint.
  void validate() const;
  /// FNV-1a over the canonical JSON without `jobs`, as 16 hex digits.
  std::string hash() const;

  std::vector<TaskFilter> filters() const;
  TaskFilter primary_filter() const;
  std::vector<Relation> relations() const;
};

/// Seed for a named purpose, derived from the experiment seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose);

struct StageCorpus {
  std::vector<EntityProfile> entities;
  std::vector<std::string> texts;  // one segment per line
};

struct ExperimentData {
  Pools pools;
  StageCorpus base, continual, forget;
  Vocabulary vocab;
  /// Task sets by filter name, over the continual entities.
  std::map<std::string, TaskSplit> tasks;
};

/// Everything the synth stage writes, as a pure function of the config.
ExperimentData build_data(const ExperimentConfig& config, const std::filesystem::path& data_dir);

std::vector<std::vector<int>> encode_segments(const Vocabulary& vocab, const std::vector<std::string>& texts);

}  // namespace kc
