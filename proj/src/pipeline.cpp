// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "kcircuits/analysis.hpp"
#include "kcircuits/svg.hpp"

namespace kc {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes through a temporary file so readers never see a partial artifact.
void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

const char* kStageFiles[] = {"synth", "train", "discover", "analyze", "lens", "heads", "transfer", "forget", "report"};

// Everything the stages after synth read back.
struct RunData {
  Vocabulary vocab;
  std::vector<std::vector<int>> base, continual, forget;
  std::map<std::string, TaskSplit> tasks;
};

std::vector<TaskExample> read_tasks(const fs::path& path) {
  std::istringstream in(read_text(path));
  return read_task_examples(in);
}

std::vector<TaskExample> head_of(const std::vector<TaskExample>& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

Model load_model(const fs::path& path) {
  if (!fs::exists(path)) throw MissingPrerequisite("checkpoint " + path.string() + " is missing");
  Model m(load_checkpoint(path));
  m.set_requires_grad(false);
  return m;
}

std::string with_provenance(const ExperimentConfig& config, const std::string& body) {
  return provenance_line(config) + "\n" + body;
}

// "# key=value" lines ahead of the edge-score and circuit tables.
std::string tsv_provenance(const ExperimentConfig& config) {
  return "# config_hash=" + config.hash() + "\n# version=" KCIRCUITS_VERSION "\n";
}

Circuit read_circuit_file(const fs::path& path, const CompGraph& g) {
  std::istringstream in(read_text(path));
  return read_circuit(in, g);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::string stage_name(Stage stage) { return kStageFiles[static_cast<std::size_t>(stage)]; }

std::optional<Stage> parse_stage(std::string_view name) {
  for (Stage s : kAllStages) {
    if (stage_name(s) == name) return s;
  }
  return std::nullopt;
}

std::string provenance_line(const ExperimentConfig& config) {
  return "# kcircuits " KCIRCUITS_VERSION " config=" + config.hash();
}

ExperimentConfig resolve_config(const std::optional<fs::path>& config_file, const fs::path& dir,
                                std::optional<std::uint64_t> seed) {
  ExperimentConfig c;
  if (config_file) {
    std::ifstream in(*config_file);
    if (!in) throw ConfigError("config: cannot read " + config_file->string());
    std::ostringstream ss;
    ss << in.rdbuf();
    c = ExperimentConfig::from_json_text(ss.str());
  } else if (fs::exists(dir / "config.json")) {
    c = ExperimentConfig::from_json_text(read_text(dir / "config.json"));
  } else {
    c = ExperimentConfig::preset("desk");
  }
  if (seed) c.seed = *seed;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(ExperimentConfig config, PipelineOptions options)
    : config_(std::move(config)), options_(std::move(options)) {
  config_.validate();
  if (options_.data_dir.empty()) options_.data_dir = default_data_dir();
  fs::create_directories(options_.dir);
  const fs::path lock = options_.dir / ".lock";
  lock_fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) throw std::runtime_error("cannot open " + lock.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw RunLocked("run directory " + options_.dir.string() + " is in use by another process");
  }
}

Pipeline::~Pipeline() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

std::string Pipeline::epoch_dir(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%02zu", epoch);
  return buf;
}

std::string Pipeline::checkpoint_path(const std::string& stage, std::size_t epoch) {
  return "checkpoints/" + stage + "/" + epoch_dir(epoch) + ".ckpt";
}

std::string Pipeline::ratio_tag(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%.2f", ratio);
  return buf;
}

void Pipeline::log(const std::string& line) const {
  if (options_.log) *options_.log << "[kcircuits] " << line << std::endl;
}

void Pipeline::require(Stage stage) const {
  const fs::path path = options_.dir / "stamps" / (stage_name(stage) + ".json");
  if (!fs::exists(path)) {
    throw MissingPrerequisite("stage '" + stage_name(stage) + "' has not completed in " + options_.dir.string() +
                              "; run `kcircuits " + stage_name(stage) + "` first");
  }
  const Json j = Json::parse(read_text(path));
  const std::string hash = j.value("config_hash", "");
  if (hash != config_.hash() && !options_.stage_override) {
    throw StaleArtifact("stage '" + stage_name(stage) + "' ran with config " + hash + " but the current config is " +
                        config_.hash() + "; rerun it or pass --stage-override");
  }
}

void Pipeline::stamp(Stage stage) const {
  Json j{{"stage", stage_name(stage)}, {"config_hash", config_.hash()}, {"version", KCIRCUITS_VERSION}};
  write_text(options_.dir / "stamps" / (stage_name(stage) + ".json"), j.dump(2) + "\n");
}

void Pipeline::run(Stage stage) {
  const auto t0 = std::chrono::steady_clock::now();
  log("stage " + stage_name(stage) + " starting");
  switch (stage) {
    case Stage::Synth: synth(); break;
    case Stage::Train: train(); break;
    case Stage::Discover: discover(); break;
    case Stage::Analyze: analyze(); break;
    case Stage::Lens: lens(); break;
    case Stage::Heads: heads(); break;
    case Stage::Transfer: transfer(); break;
    case Stage::Forget: forget(); break;
    case Stage::Report: report(); break;
  }
  stamp(stage);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log("stage " + stage_name(stage) + " done in " + fmt6(s).substr(0, fmt6(s).size() - 5) + " s");
}

void Pipeline::run_all() {
  for (Stage s : kAllStages) run(s);
}

// ---------------------------------------------------------------------------
// synth

void Pipeline::synth() {
  const fs::path& dir = options_.dir;
  if (fs::exists(dir / "config.json") && !options_.stage_override) {
    const auto existing = ExperimentConfig::from_json_text(read_text(dir / "config.json"));
    if (existing.hash() != config_.hash()) {
      throw StaleArtifact("run directory holds config " + existing.hash() + ", not " + config_.hash() +
                          "; use a fresh --out or pass --stage-override");
    }
  }
  write_text(dir / "config.json", config_.to_json_text());
  const ExperimentData data = build_data(config_, options_.data_dir);

  write_text(dir / "corpus" / "base.txt", join_lines(data.base.texts));
  write_text(dir / "corpus" / "continual.txt", join_lines(data.continual.texts));
  write_text(dir / "corpus" / "forget.txt", join_lines(data.forget.texts));
  for (const auto& [name, stage] : {std::pair{"base", &data.base}, std::pair{"continual", &data.continual},
                                    std::pair{"forget", &data.forget}}) {
    std::ostringstream os;
    write_entity_manifest(os, stage->entities);
    write_text(dir / "corpus" / (std::string(name) + "_entities.tsv"), os.str());
  }
  write_text(dir / "vocab.txt", join_lines(data.vocab.tokens()));

  Json manifest{{"config_hash", config_.hash()},
                {"version", KCIRCUITS_VERSION},
                {"tokenizer", "word-level"},
                {"vocab_size", data.vocab.size()},
                {"segments",
                 {{"base", data.base.texts.size()},
                  {"continual", data.continual.texts.size()},
                  {"forget", data.forget.texts.size()}}},
                {"tasks", Json::object()}};
  for (const auto& [name, split] : data.tasks) {
    for (const auto& [part, examples] : {std::pair{"validation", &split.validation}, std::pair{"test", &split.test}}) {
      std::ostringstream os;
      write_task_examples(os, *examples, data.vocab);
      write_text(dir / "tasks" / (name + "." + part + ".jsonl"), os.str());
    }
    manifest["tasks"][name] = {{"validation", split.validation.size()}, {"test", split.test.size()}};
    if (split.validation.empty() || split.test.empty()) {
      throw ConfigError("synth: filter " + name + " produced no task examples; adjust corpus.entities or filters");
    }
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  log("synth: vocab " + std::to_string(data.vocab.size()) + ", segments base " +
      std::to_string(data.base.texts.size()) + " continual " + std::to_string(data.continual.texts.size()) +
      " forget " + std::to_string(data.forget.texts.size()));
}

namespace {

RunData load_run_data(const fs::path& dir, const ExperimentConfig& config) {
  RunData d;
  d.vocab = Vocabulary::from_tokens(read_lines(dir / "vocab.txt"));
  d.base = encode_segments(d.vocab, read_lines(dir / "corpus" / "base.txt"));
  d.continual = encode_segments(d.vocab, read_lines(dir / "corpus" / "continual.txt"));
  d.forget = encode_segments(d.vocab, read_lines(dir / "corpus" / "forget.txt"));
  for (const auto& f : config.analysis.filters) {
    d.tasks[f].validation = read_tasks(dir / "tasks" / (f + ".validation.jsonl"));
    d.tasks[f].test = read_tasks(dir / "tasks" / (f + ".test.jsonl"));
  }
  return d;
}

ModelConfig model_config(const ExperimentConfig& config, const Vocabulary& vocab) {
  ModelConfig m = config.model;
  m.vocab_size = vocab.size();
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// train

void Pipeline::train() {
  require(Stage::Synth);
  const fs::path& dir = options_.dir;
  const RunData data = load_run_data(dir, config_);
  Model model(model_config(config_, data.vocab), derive_seed(config_.seed, "init"));
  const std::string meta = "config_hash=" + config_.hash() + " version=" KCIRCUITS_VERSION;

  auto run_stage = [&](const std::string& name, const std::vector<std::vector<int>>& segs, TrainConfig tc,
                       Phase phase) {
    tc.seed = derive_seed(config_.seed, "train-" + name);
    fs::remove_all(dir / "checkpoints" / name);
    fs::create_directories(dir / "checkpoints" / name);
    auto sink = [&](const Checkpoint& ck) {
      Checkpoint c = ck;
      c.metadata = meta;
      save_checkpoint(c, dir / checkpoint_path(name, ck.epoch));
      if (ck.epoch > 0) log("train " + name + ": epoch " + std::to_string(ck.epoch) + "/" + std::to_string(tc.epochs));
    };
    const TrainReport r = kc::train(model, segs, tc, phase, sink);
    std::ostringstream os;
    write_loss_csv(os, r);
    write_text(dir / ("loss_" + name + ".csv"), with_provenance(config_, os.str()));
  };
  run_stage("base", data.base, config_.base, Phase::Base);
  run_stage("continual", data.continual, config_.continual, Phase::Continual);
}

// ---------------------------------------------------------------------------
// discover

void Pipeline::discover() {
  require(Stage::Train);
  const fs::path& dir = options_.dir;
  const RunData data = load_run_data(dir, config_);
  const ModelConfig mc = model_config(config_, data.vocab);
  const CompGraph g(mc);
  const std::size_t E = config_.continual.epochs;
  const auto& filters = config_.analysis.filters;
  const AttributionOptions ao{config_.discovery.steps, config_.jobs};

  std::map<std::string, std::vector<EdgeScores>> scores;
  for (std::size_t e = 0; e <= E; ++e) {
    const Model m = load_model(dir / checkpoint_path("continual", e));
    for (const auto& f : filters) {
      const auto ex = head_of(data.tasks.at(f).validation, config_.discovery.examples);
      EdgeScores s = eap_ig_scores(m, g, ex, ao);
      s.checkpoint = "continual/" + epoch_dir(e);
      std::ostringstream os;
      write_edge_scores(os, g, s);
      write_text(dir / "scores" / epoch_dir(e) / (f + ".tsv"), tsv_provenance(config_) + os.str());
      scores[f].push_back(std::move(s));
    }
    log("discover: scored epoch " + std::to_string(e) + "/" + std::to_string(E));
  }

  std::size_t n = 0;
  Json cal{{"config_hash", config_.hash()}, {"version", KCIRCUITS_VERSION}, {"edges", g.edge_count()}};
  if (config_.discovery.edge_budget > 0) {
    n = std::min(config_.discovery.edge_budget, g.edge_count());
    cal["mode"] = "fixed";
  } else {
    const std::string pf = config_.analysis.primary_filter;
    const Model m = load_model(dir / checkpoint_path("continual", E));
    const auto ex = head_of(data.tasks.at(pf).validation, config_.discovery.examples);
    const Calibration c = calibrate_edge_budget(m, g, scores.at(pf).back(), ex, config_.discovery.calibration_target,
                                                config_.jobs);
    n = c.n;
    cal["mode"] = "calibrated";
    cal["checkpoint"] = "continual/" + epoch_dir(E);
    cal["filter"] = pf;
    cal["target"] = config_.discovery.calibration_target;
    cal["circuit_hit_at_10"] = c.circuit_hit_at_10;
    cal["model_hit_at_10"] = c.model_hit_at_10;
    cal["degenerate"] = c.degenerate;
    Json sweep = Json::array();
    for (std::size_t i = 0; i < c.sweep_n.size(); ++i) sweep.push_back({{"n", c.sweep_n[i]}, {"hit_at_10", c.sweep_hit_at_10[i]}});
    cal["sweep"] = sweep;
  }
  cal["n"] = n;
  write_text(dir / "calibration.json", cal.dump(2) + "\n");
  log("discover: edge budget " + std::to_string(n) + " of " + std::to_string(g.edge_count()));

  for (const auto& f : filters) {
    for (std::size_t e = 0; e <= E; ++e) {
      Circuit c = extract_circuit(g, scores.at(f)[e], n);
      c.filter = f;
      std::ostringstream os;
      write_circuit(os, g, c);
      write_text(dir / "circuits" / epoch_dir(e) / (f + ".tsv"), tsv_provenance(config_) + os.str());
    }
  }
}

// ---------------------------------------------------------------------------
// analyze

void Pipeline::analyze() {
  require(Stage::Discover);
  const fs::path& dir = options_.dir;
  const RunData data = load_run_data(dir, config_);
  const ModelConfig mc = model_config(config_, data.vocab);
  const CompGraph g(mc);
  const std::size_t E = config_.continual.epochs;
  const auto& filters = config_.analysis.filters;

  std::map<std::string, std::vector<Circuit>> circuits;
  for (const auto& f : filters) {
    for (std::size_t e = 0; e <= E; ++e) {
      circuits[f].push_back(read_circuit_file(dir / "circuits" / epoch_dir(e) / (f + ".tsv"), g));
    }
  }

  std::vector<MetricsRow> rows;
  for (std::size_t e = 0; e <= E; ++e) {
    const Model m = load_model(dir / checkpoint_path("continual", e));
    for (const auto& f : filters) {
      const auto& test = data.tasks.at(f).test;
      const Circuit& c = circuits.at(f)[e];
      const Circuit& last = circuits.at(f).back();
      CircuitEvaluator ev(m, g, test, config_.jobs);
      MetricsRow r;
      r.stage = "continual";
      r.epoch = e;
      r.filter = f;
      r.edges = c.size();
      r.hit_at_10 = ev.evaluate(c).hit_at_10;
      r.model_hit_at_10 = ev.whole_model().hit_at_10;
      r.circuit_entropy = circuit_entropy(c);
      r.jaccard_edges_vs_final = jaccard_edges(c, last);
      r.jaccard_nodes_vs_final = jaccard_nodes(c, last);
      r.activation = edge_activation_ratio(c, g);
      r.heads = count_heads(classify_heads(m, test), mc.n_layers);
      const Accuracies acc = whole_model_accuracies(m, test);
      r.first_token_accuracy = acc.first_token;
      r.query_accuracy = acc.query;
      rows.push_back(std::move(r));
    }
    log("analyze: epoch " + std::to_string(e) + "/" + std::to_string(E));
  }
  std::ostringstream os;
  write_metrics_csv(os, rows, mc.n_layers);
  write_text(dir / "metrics.csv", with_provenance(config_, os.str()));

  // Phase shift of the primary filter's circuit entropy, then every epoch's
  // topology evaluated with the final checkpoint's weights.
  const std::string pf = config_.analysis.primary_filter;
  std::vector<double> entropy;
  for (const auto& r : rows) {
    if (r.filter == pf) entropy.push_back(r.circuit_entropy);
  }
  Json ps{{"config_hash", config_.hash()}, {"version", KCIRCUITS_VERSION}, {"filter", pf}, {"series", "circuit_entropy"},
          {"smoothing_window", 3}};
  std::ostringstream aligned;
  aligned << provenance_line(config_) << "\n# topology from each epoch, weights from epoch " << E << "\n";
  aligned << "epoch,phase,edges,hit_at_10\n";
  if (entropy.size() < 5) {
    ps["detected"] = false;
    ps["reason"] = "needs at least 5 epochs, have " + std::to_string(entropy.size());
  } else {
    const PhaseShift shift = detect_phase_shift(entropy);
    ps["detected"] = shift.shift;
    ps["breakpoint_epoch"] = shift.breakpoint;
    ps["slope_before"] = shift.slope_before;
    ps["slope_after"] = shift.slope_after;
    ps["squared_error"] = shift.squared_error;
    const Model final_model = load_model(dir / checkpoint_path("continual", E));
    CircuitEvaluator ev(final_model, g, data.tasks.at(pf).test, config_.jobs);
    std::vector<double> pre, post;
    for (std::size_t e = 0; e <= E; ++e) {
      const double hit = ev.evaluate(circuits.at(pf)[e]).hit_at_10;
      const char* phase = e < shift.breakpoint ? "pre" : (e == shift.breakpoint ? "breakpoint" : "post");
      if (e < shift.breakpoint) pre.push_back(hit);
      if (e > shift.breakpoint) post.push_back(hit);
      aligned << e << ',' << phase << ',' << circuits.at(pf)[e].size() << ',' << fmt6(hit) << '\n';
    }
    ps["aligned_pre_mean_hit_at_10"] = mean_of(pre);
    ps["aligned_post_mean_hit_at_10"] = mean_of(post);
  }
  write_text(dir / "phase_shift.json", ps.dump(2) + "\n");
  write_text(dir / "aligned.csv", aligned.str());
}

// ---------------------------------------------------------------------------
// lens, heads, transfer

void Pipeline::lens() {
  require(Stage::Train);
  const fs::path& dir = options_.dir;
  const RunData data = load_run_data(dir, config_);
  const std::string pf = config_.analysis.primary_filter;
  std::vector<LensRow> rows;
  for (std::size_t e = 0; e <= config_.continual.epochs; ++e) {
    const Model m = load_model(dir / checkpoint_path("continual", e));
    for (const auto& p : logit_lens_trace(m, data.tasks.at(pf).test)) rows.push_back({"continual", e, pf, p});
  }
  std::ostringstream os;
  write_lens_csv(os, rows);
  write_text(dir / "lens.csv", with_provenance(config_, os.str()));
}

void Pipeline::heads() {
  require(Stage::Train);
  const fs::path& dir = options_.dir;
  const RunData data = load_run_data(dir, config_);
  const std::string pf = config_.analysis.primary_filter;
  std::ostringstream os;
  os << provenance_line(config_) << "\n# dla=direct logit attribution onto the target, summed over test examples; tau="
     << kHeadTau << "\n";
  os << "stage,epoch,filter,layer,head,dla_subject,dla_relation,ratio,kind,degenerate\n";
  for (std::size_t e = 0; e <= config_.continual.epochs; ++e) {
    const Model m = load_model(dir / checkpoint_path("continual", e));
    for (const auto& h : classify_heads(m, data.tasks.at(pf).test)) {
      os << "continual," << e << ',' << pf << ',' << h.head.layer << ',' << h.head.head << ',' << fmt6(h.dla_subject)
         << ',' << fmt6(h.dla_relation) << ',' << (std::isinf(h.ratio) ? std::string("inf") : fmt6(h.ratio)) << ','
         << head_kind_name(h.kind) << ',' << (h.degenerate ? 1 : 0) << '\n';
    }
  }
  write_text(dir / "heads.csv", os.str());
}

void Pipeline::transfer() {
  require(Stage::Discover);
  const fs::path& dir = options_.dir;
  const RunData data = load_run_data(dir, config_);
  const ModelConfig mc = model_config(config_, data.vocab);
  const CompGraph g(mc);
  const std::size_t E = config_.continual.epochs;

  std::vector<std::string> names;
  for (const auto& f : config_.analysis.filters) {
    if (f == "low" || f == "medium" || f == "high") names.push_back(f);
  }
  if (names.size() < 2) names = config_.analysis.filters;
  std::vector<Circuit> circuits;
  std::vector<std::vector<TaskExample>> tests;
  for (const auto& f : names) {
    circuits.push_back(read_circuit_file(dir / "circuits" / epoch_dir(E) / (f + ".tsv"), g));
    tests.push_back(data.tasks.at(f).test);
  }
  const Model m = load_model(dir / checkpoint_path("continual", E));
  const auto matrix = transfer_matrix(m, circuits, tests, config_.jobs);
  std::ostringstream os;
  os << provenance_line(config_) << "\n# circuits and weights from continual epoch " << E << "\n";
  os << "circuit_filter,test_filter,hit_at_10,model_hit_at_10\n";
  for (std::size_t j = 0; j < names.size(); ++j) {
    const double model_hit = CircuitEvaluator(m, g, tests[j], config_.jobs).whole_model().hit_at_10;
    for (std::size_t i = 0; i < names.size(); ++i) {
      os << names[i] << ',' << names[j] << ',' << fmt6(matrix[i][j]) << ',' << fmt6(model_hit) << '\n';
    }
  }
  write_text(dir / "transfer.csv", os.str());
}

// ---------------------------------------------------------------------------
// forget

void Pipeline::forget() {
  require(Stage::Discover);
  const fs::path& dir = options_.dir;
  const RunData data = load_run_data(dir, config_);
  if (data.forget.empty()) throw ConfigError("forget: corpus.forget_entities is 0");
  const ModelConfig mc = model_config(config_, data.vocab);
  const CompGraph g(mc);
  const std::size_t E = config_.continual.epochs;
  const std::string pf = config_.analysis.primary_filter;
  const Circuit reference = read_circuit_file(dir / "circuits" / epoch_dir(E) / (pf + ".tsv"), g);
  const std::size_t n = reference.size();
  const auto val = head_of(data.tasks.at(pf).validation, config_.discovery.examples);
  const auto& test = data.tasks.at(pf).test;
  const AttributionOptions ao{config_.discovery.steps, config_.jobs};
  const std::string meta = "config_hash=" + config_.hash() + " version=" KCIRCUITS_VERSION;

  std::ostringstream os;
  os << provenance_line(config_) << "\n# reference: " << pf << " circuit of continual epoch " << E << "\n";
  os << "replay_ratio,epoch,edges,jaccard_edges,jaccard_nodes,hit_at_10,model_hit_at_10\n";
  for (double ratio : config_.analysis.replay_ratios) {
    const std::string tag = ratio_tag(ratio);
    Model model(load_checkpoint(dir / checkpoint_path("continual", E)));
    TrainConfig tc = config_.forget;
    tc.replay_ratio = ratio;
    tc.seed = derive_seed(config_.seed, "forget-" + tag);
    fs::remove_all(dir / "checkpoints" / ("forget_" + tag));
    fs::create_directories(dir / "checkpoints" / ("forget_" + tag));
    auto sink = [&](const Checkpoint& ck) {
      Checkpoint saved = ck;
      saved.metadata = meta;
      save_checkpoint(saved, dir / checkpoint_path("forget_" + tag, ck.epoch));
      Model m(ck);
      m.set_requires_grad(false);
      EdgeScores s = eap_ig_scores(m, g, val, ao);
      s.checkpoint = "forget_" + tag + "/" + epoch_dir(ck.epoch);
      Circuit c = extract_circuit(g, s, n);
      c.filter = pf;
      std::ostringstream cs;
      write_circuit(cs, g, c);
      write_text(dir / "forget" / tag / (epoch_dir(ck.epoch) + ".tsv"), tsv_provenance(config_) + cs.str());
      CircuitEvaluator ev(m, g, test, config_.jobs);
      os << fmt6(ratio) << ',' << ck.epoch << ',' << c.size() << ',' << fmt6(jaccard_edges(c, reference)) << ','
         << fmt6(jaccard_nodes(c, reference)) << ',' << fmt6(ev.evaluate(c).hit_at_10) << ','
         << fmt6(ev.whole_model().hit_at_10) << '\n';
      log("forget " + tag + ": epoch " + std::to_string(ck.epoch) + "/" + std::to_string(tc.epochs));
    };
    kc::train(model, data.forget, tc, Phase::Forgetting, sink, data.continual);
  }
  write_text(dir / "forget.csv", os.str());
}

// ---------------------------------------------------------------------------
// report

namespace {

Series series_of(const std::string& name, const std::vector<double>& x, const std::vector<double>& y,
                 bool smoothed) {
  Series s;
  s.name = name;
  s.x = x;
  s.y = smoothed && y.size() >= 3 ? smooth(y) : y;
  return s;
}

std::vector<std::size_t> rows_where(const CsvTable& t, const std::string& column, const std::string& value) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (t.text(i, column) == value) out.push_back(i);
  }
  return out;
}

std::vector<double> column_of(const CsvTable& t, const std::vector<std::size_t>& rows, const std::string& column) {
  std::vector<double> out;
  for (std::size_t r : rows) out.push_back(t.number(r, column));
  return out;
}

}  // namespace

void Pipeline::report() {
  require(Stage::Analyze);
  const fs::path& dir = options_.dir;
  const fs::path out = dir / "report";
  const std::string comment = provenance_line(config_).substr(2);
  const CsvTable metrics = read_csv_file(dir / "metrics.csv");
  const std::string pf = config_.analysis.primary_filter;
  const std::size_t n_epochs = rows_where(metrics, "filter", pf).size();
  const std::string smooth_note =
      n_epochs >= 3 ? "solid: window-3 centered moving average; dashed: raw" : "fewer than 3 epochs: raw values, no smoothing";
  auto save = [&](const std::string& name, const Chart& c) { write_text(out / (name + ".svg"), render_svg(c, comment)); };

  auto per_filter = [&](const std::string& column, const std::string& title, const std::string& ylabel) {
    Chart c;
    c.title = title;
    c.x_label = "continual epoch";
    c.y_label = ylabel;
    c.notes = {smooth_note};
    for (const auto& f : config_.analysis.filters) {
      const auto rows = rows_where(metrics, "filter", f);
      const auto x = column_of(metrics, rows, "epoch");
      const auto y = column_of(metrics, rows, column);
      c.series.push_back(series_of(f, x, y, true));
      if (n_epochs >= 3) {
        Series raw = series_of(f + " raw", x, y, false);
        raw.dashed = true;
        c.series.push_back(raw);
      }
    }
    return c;
  };
  save("hit_at_10", per_filter("hit_at_10", "Circuit Hit@10", "Hit@10"));
  save("model_hit_at_10", per_filter("model_hit_at_10", "Whole-model Hit@10", "Hit@10"));
  save("query_accuracy", per_filter("query_accuracy", "Whole-model query accuracy", "exact match"));

  Chart entropy = per_filter("circuit_entropy", "Circuit entropy", "H(C), nats");
  if (fs::exists(dir / "phase_shift.json")) {
    const Json ps = Json::parse(read_text(dir / "phase_shift.json"));
    if (ps.contains("breakpoint_epoch")) {
      entropy.marker_x = ps["breakpoint_epoch"].get<double>();
      entropy.marker_label = std::string(ps["detected"].get<bool>() ? "phase shift" : "best hinge (no shift)");
    }
  }
  save("entropy", entropy);

  {
    Chart c;
    c.title = "Jaccard similarity to the final circuit (" + pf + ")";
    c.x_label = "continual epoch";
    c.y_label = "Jaccard";
    c.notes = {smooth_note};
    const auto rows = rows_where(metrics, "filter", pf);
    const auto x = column_of(metrics, rows, "epoch");
    c.series.push_back(series_of("edges", x, column_of(metrics, rows, "jaccard_edges_vs_final"), true));
    c.series.push_back(series_of("nodes", x, column_of(metrics, rows, "jaccard_nodes_vs_final"), true));
    save("jaccard", c);
  }
  {
    Chart c;
    c.title = "Edge activation ratio by source layer (" + pf + ")";
    c.x_label = "continual epoch";
    c.y_label = "share of outgoing edges kept";
    c.notes = {smooth_note};
    const auto rows = rows_where(metrics, "filter", pf);
    const auto x = column_of(metrics, rows, "epoch");
    c.series.push_back(series_of("input", x, column_of(metrics, rows, "activation_input"), true));
    for (std::size_t l = 0; l + 1 < config_.model.n_layers; ++l) {
      const std::string col = "activation_l" + std::to_string(l);
      c.series.push_back(series_of("layer " + std::to_string(l), x, column_of(metrics, rows, col), true));
    }
    save("activation_ratio", c);
  }
  {
    Chart c;
    c.title = "Specialized heads (" + pf + ")";
    c.x_label = "continual epoch";
    c.y_label = "heads";
    c.notes = {smooth_note};
    const auto rows = rows_where(metrics, "filter", pf);
    const auto x = column_of(metrics, rows, "epoch");
    for (const char* kind : {"mover", "relation", "mixture"}) {
      std::vector<double> total(rows.size(), 0.0);
      for (std::size_t l = 0; l < config_.model.n_layers; ++l) {
        const auto v = column_of(metrics, rows, std::string(kind) + "_l" + std::to_string(l));
        for (std::size_t i = 0; i < v.size(); ++i) total[i] += v[i];
      }
      c.series.push_back(series_of(kind, x, total, true));
    }
    save("heads", c);
  }
  if (fs::exists(dir / "lens.csv")) {
    const CsvTable lens = read_csv_file(dir / "lens.csv");
    Chart c;
    c.title = "Target rank at each layer boundary (" + pf + ")";
    c.x_label = "layer boundary (0 = embedding)";
    c.y_label = "median rank";
    std::vector<std::size_t> epochs;
    for (std::size_t i = 0; i < lens.rows.size(); ++i) {
      const auto e = static_cast<std::size_t>(lens.number(i, "epoch"));
      if (epochs.empty() || epochs.back() != e) epochs.push_back(e);
    }
    std::vector<std::size_t> pick;
    if (!epochs.empty()) pick = {epochs.front(), epochs[epochs.size() / 2], epochs.back()};
    pick.erase(std::unique(pick.begin(), pick.end()), pick.end());
    for (std::size_t e : pick) {
      const auto rows = rows_where(lens, "epoch", std::to_string(e));
      c.series.push_back(series_of("epoch " + std::to_string(e), column_of(lens, rows, "layer"),
                                   column_of(lens, rows, "rank"), false));
    }
    save("lens_rank", c);
  }
  if (fs::exists(dir / "forget.csv")) {
    const CsvTable fg = read_csv_file(dir / "forget.csv");
    Chart c;
    c.title = "Edge Jaccard to the pre-forgetting circuit";
    c.x_label = "forgetting epoch";
    c.y_label = "Jaccard";
    for (double r : config_.analysis.replay_ratios) {
      const auto rows = rows_where(fg, "replay_ratio", fmt6(r));
      c.series.push_back(series_of("replay " + fmt6(r).substr(0, 4), column_of(fg, rows, "epoch"),
                                   column_of(fg, rows, "jaccard_edges"), false));
    }
    save("forget_jaccard", c);
  }
  if (fs::exists(dir / "aligned.csv")) {
    const CsvTable al = read_csv_file(dir / "aligned.csv");
    Chart c;
    c.title = "Each epoch's topology with the final weights (" + pf + ")";
    c.x_label = "topology epoch";
    c.y_label = "Hit@10";
    std::vector<std::size_t> all(al.rows.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    c.series.push_back(series_of("aligned", column_of(al, all, "epoch"), column_of(al, all, "hit_at_10"), false));
    c.marker_x = entropy.marker_x;
    c.marker_label = entropy.marker_label;
    save("aligned", c);
  }
}

// ---------------------------------------------------------------------------
// CSV

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw std::out_of_range("csv: no column '" + name + "'");
}

double CsvTable::number(std::size_t row, const std::string& name) const {
  const std::string& s = text(row, name);
  if (s == "inf") return INFINITY;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("csv: '" + s + "' in column " + name + " is not a number");
  return v;
}

const std::string& CsvTable::text(std::size_t row, const std::string& name) const {
  return rows.at(row).at(column(name));
}

CsvTable read_csv(std::istream& is) {
  CsvTable t;
  std::string line;
  bool have_header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
    } else {
      if (cells.size() != t.header.size()) {
        throw std::invalid_argument("csv: row has " + std::to_string(cells.size()) + " cells, header has " +
                                    std::to_string(t.header.size()));
      }
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

CsvTable read_csv_file(const fs::path& path) {
  std::istringstream in(read_text(path));
  return read_csv(in);
}

}  // namespace kc
