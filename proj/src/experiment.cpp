// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#include <json.hpp>

#include "kcircuits/rng.hpp"

namespace kc {

using Json = nlohmann::ordered_json;

namespace {

Json train_json(const TrainConfig& t) {
  return Json{{"learning_rate", t.learning_rate},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"epsilon", t.epsilon},
              {"weight_decay", t.weight_decay},
              {"max_grad_norm", t.max_grad_norm},
              {"grad_accum", t.grad_accum},
              {"batch_size", t.batch_size},
              {"block_size", t.block_size},
              {"epochs", t.epochs},
              {"reshuffle_segments", t.reshuffle_segments}};
}

void train_from(const Json& j, TrainConfig& t) {
  j.at("learning_rate").get_to(t.learning_rate);
  j.at("beta1").get_to(t.beta1);
  j.at("beta2").get_to(t.beta2);
  j.at("epsilon").get_to(t.epsilon);
  j.at("weight_decay").get_to(t.weight_decay);
  j.at("max_grad_norm").get_to(t.max_grad_norm);
  j.at("grad_accum").get_to(t.grad_accum);
  j.at("batch_size").get_to(t.batch_size);
  j.at("block_size").get_to(t.block_size);
  j.at("epochs").get_to(t.epochs);
  j.at("reshuffle_segments").get_to(t.reshuffle_segments);
}

Json to_json(const ExperimentConfig& c) {
  const auto& m = c.model;
  const auto& k = c.corpus;
  const auto& d = c.discovery;
  const auto& a = c.analysis;
  return Json{
      {"name", c.name},
      {"seed", c.seed},
      {"jobs", c.jobs},
      {"model",
       {{"n_layers", m.n_layers},
        {"n_heads", m.n_heads},
        {"d_model", m.d_model},
        {"d_mlp", m.d_mlp},
        {"max_context", m.max_context},
        {"layernorm_epsilon", m.layernorm_epsilon},
        {"tie_unembedding", m.tie_unembedding}}},
      {"corpus",
       {{"entities", k.entities},
        {"relevant_parts", k.relevant_parts},
        {"new_parts", k.new_parts},
        {"base_filler", k.base_filler},
        {"anchor_frequency", k.anchor_frequency},
        {"forget_entities", k.forget_entities},
        {"templates_per_relation", k.templates_per_relation},
        {"frequency_scale", k.frequency_scale},
        {"frequency_min", k.frequency_min},
        {"frequency_max", k.frequency_max},
        {"task_examples", k.task_examples}}},
      {"train", {{"base", train_json(c.base)}, {"continual", train_json(c.continual)}, {"forget", train_json(c.forget)}}},
      {"discovery",
       {{"steps", d.steps},
        {"edge_budget", d.edge_budget},
        {"calibration_target", d.calibration_target},
        {"examples", d.examples}}},
      {"analysis",
       {{"filters", a.filters},
        {"relations", a.relations},
        {"primary_filter", a.primary_filter},
        {"replay_ratios", a.replay_ratios}}},
  };
}

ExperimentConfig from_json(const Json& j) {
  ExperimentConfig c;
  j.at("name").get_to(c.name);
  j.at("seed").get_to(c.seed);
  j.at("jobs").get_to(c.jobs);
  const auto& m = j.at("model");
  m.at("n_layers").get_to(c.model.n_layers);
  m.at("n_heads").get_to(c.model.n_heads);
  m.at("d_model").get_to(c.model.d_model);
  m.at("d_mlp").get_to(c.model.d_mlp);
  m.at("max_context").get_to(c.model.max_context);
  m.at("layernorm_epsilon").get_to(c.model.layernorm_epsilon);
  m.at("tie_unembedding").get_to(c.model.tie_unembedding);
  const auto& k = j.at("corpus");
  k.at("entities").get_to(c.corpus.entities);
  k.at("relevant_parts").get_to(c.corpus.relevant_parts);
  k.at("new_parts").get_to(c.corpus.new_parts);
  k.at("base_filler").get_to(c.corpus.base_filler);
  k.at("anchor_frequency").get_to(c.corpus.anchor_frequency);
  k.at("forget_entities").get_to(c.corpus.forget_entities);
  k.at("templates_per_relation").get_to(c.corpus.templates_per_relation);
  k.at("frequency_scale").get_to(c.corpus.frequency_scale);
  k.at("frequency_min").get_to(c.corpus.frequency_min);
  k.at("frequency_max").get_to(c.corpus.frequency_max);
  k.at("task_examples").get_to(c.corpus.task_examples);
  train_from(j.at("train").at("base"), c.base);
  train_from(j.at("train").at("continual"), c.continual);
  train_from(j.at("train").at("forget"), c.forget);
  const auto& d = j.at("discovery");
  d.at("steps").get_to(c.discovery.steps);
  d.at("edge_budget").get_to(c.discovery.edge_budget);
  d.at("calibration_target").get_to(c.discovery.calibration_target);
  d.at("examples").get_to(c.discovery.examples);
  const auto& a = j.at("analysis");
  a.at("filters").get_to(c.analysis.filters);
  a.at("relations").get_to(c.analysis.relations);
  a.at("primary_filter").get_to(c.analysis.primary_filter);
  a.at("replay_ratios").get_to(c.analysis.replay_ratios);
  return c;
}

// Overlays `patch` onto `base`, refusing keys the base does not have and
// values whose JSON type differs (integers may stand in for floats).
void overlay(Json& base, const Json& patch, const std::string& path) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    Json& dst = base[it.key()];
    const Json& src = it.value();
    if (dst.is_object()) {
      if (!src.is_object()) throw ConfigError("config: '" + key + "' must be an object");
      overlay(dst, src, key);
      continue;
    }
    const bool both_numbers = dst.is_number() && src.is_number();
    if (!both_numbers && dst.type() != src.type()) {
      throw ConfigError("config: '" + key + "' has the wrong type (expected " + std::string(dst.type_name()) + ")");
    }
    if (dst.is_number_unsigned() && src.is_number_integer() && src.get<std::int64_t>() < 0) {
      throw ConfigError("config: '" + key + "' must be non-negative");
    }
    if ((dst.is_number_integer()) && src.is_number_float()) {
      throw ConfigError("config: '" + key + "' must be an integer");
    }
    dst = src;
  }
}

TrainConfig base_train() {
  TrainConfig t;
  t.learning_rate = 1e-3;
  t.epochs = 20;
  return t;
}

}  // namespace

ExperimentConfig ExperimentConfig::preset(std::string_view name) {
  ExperimentConfig c;
  c.base = base_train();
  c.continual = base_train();
  c.forget = base_train();
  c.base.epochs = 10;
  c.forget.epochs = 6;
  if (name == "desk") {
    c.name = "desk";
    return c;
  }
  if (name == "smoke") {
    c.name = "smoke";
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.d_model = 32;
    c.model.d_mlp = 128;
    c.model.max_context = 64;
    c.corpus.entities = 60;
    c.corpus.base_filler = 30;
    c.corpus.forget_entities = 30;
    c.corpus.templates_per_relation = 3;
    c.corpus.task_examples = 16;
    for (auto* t : {&c.base, &c.continual, &c.forget}) {
      t->block_size = 64;
      t->learning_rate = 2e-3;
    }
    c.base.epochs = 2;
    c.continual.epochs = 5;
    c.forget.epochs = 2;
    c.discovery.examples = 8;
    c.analysis.filters = {"K_rel", "K_compl"};
    c.analysis.replay_ratios = {0.0, 0.5};
    return c;
  }
  if (name == "gpt2-small") {
    // GPT-2 Small shape with an 8000-edge budget; far beyond desk compute.
    c.name = "gpt2-small";
    c.model.n_layers = 12;
    c.model.n_heads = 12;
    c.model.d_model = 768;
    c.model.d_mlp = 3072;
    c.model.max_context = 1024;
    c.corpus.entities = 50000;
    c.corpus.base_filler = 0;
    c.corpus.forget_entities = 10000;
    c.corpus.templates_per_relation = 50;
    c.corpus.task_examples = 300;
    c.discovery.edge_budget = 8000;
    for (auto* t : {&c.base, &c.continual, &c.forget}) {
      t->block_size = 1024;
      t->batch_size = 8;
    }
    c.continual.epochs = 25;
    return c;
  }
  throw ConfigError("config: unknown preset '" + std::string(name) + "' (expected desk, smoke or gpt2-small)");
}

ExperimentConfig ExperimentConfig::from_json_text(std::string_view text) {
  Json patch;
  try {
    patch = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  if (!patch.is_object()) throw ConfigError("config: top level must be an object");
  std::string preset_name = "desk";
  if (patch.contains("preset")) {
    if (!patch["preset"].is_string()) throw ConfigError("config: 'preset' must be a string");
    preset_name = patch["preset"].get<std::string>();
    patch.erase("preset");
  }
  Json base = to_json(preset(preset_name));
  overlay(base, patch, "");
  ExperimentConfig c;
  try {
    c = from_json(base);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::to_json_text() const { return to_json(*this).dump(2) + "\n"; }

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("config: name must not be empty");
  for (char ch : name) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_')) {
      throw ConfigError("config: name may only hold letters, digits, '-' and '_'");
    }
  }
  ModelConfig m = model;
  m.vocab_size = 1;
  m.validate();
  if (corpus.entities == 0) throw ConfigError("config: corpus.entities must be positive");
  if (corpus.relevant_parts == 0 || corpus.new_parts == 0) {
    throw ConfigError("config: corpus.relevant_parts and corpus.new_parts must be positive");
  }
  if (corpus.anchor_frequency < 1) throw ConfigError("config: corpus.anchor_frequency must be at least 1");
  if (corpus.templates_per_relation == 0) throw ConfigError("config: corpus.templates_per_relation must be positive");
  if (!(corpus.frequency_scale >= 0.0)) throw ConfigError("config: corpus.frequency_scale must be non-negative");
  if (corpus.frequency_min < 1 || corpus.frequency_max < corpus.frequency_min) {
    throw ConfigError("config: need 1 <= frequency_min <= frequency_max");
  }
  if (corpus.task_examples == 0) throw ConfigError("config: corpus.task_examples must be positive");
  for (const auto* t : {&base, &continual, &forget}) {
    t->validate();
    if (t->block_size > model.max_context) throw ConfigError("config: block_size exceeds model.max_context");
  }
  if (discovery.steps == 0) throw ConfigError("config: discovery.steps must be at least 1");
  if (discovery.examples == 0) throw ConfigError("config: discovery.examples must be positive");
  if (!(discovery.calibration_target > 0.0 && discovery.calibration_target <= 1.0)) {
    throw ConfigError("config: discovery.calibration_target must lie in (0, 1]");
  }
  if (analysis.filters.empty()) throw ConfigError("config: analysis.filters must not be empty");
  for (const auto& f : analysis.filters) {
    if (!TaskFilter::parse(f)) throw ConfigError("config: unknown filter '" + f + "'");
  }
  if (std::find(analysis.filters.begin(), analysis.filters.end(), analysis.primary_filter) == analysis.filters.end()) {
    throw ConfigError("config: primary_filter '" + analysis.primary_filter + "' is not among analysis.filters");
  }
  if (analysis.relations.empty()) throw ConfigError("config: analysis.relations must not be empty");
  for (const auto& r : analysis.relations) {
    auto rel = parse_relation(r);
    if (!rel || !is_query_relation(*rel)) throw ConfigError("config: '" + r + "' is not a query relation");
  }
  for (double r : analysis.replay_ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("config: replay ratios must lie in [0, 1]");
  }
  if (jobs == 0) throw ConfigError("config: jobs must be positive");
}

std::string ExperimentConfig::hash() const {
  Json j = to_json(*this);
  j.erase("jobs");  // results do not depend on the worker count
  const std::string text = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<TaskFilter> ExperimentConfig::filters() const {
  std::vector<TaskFilter> out;
  for (const auto& f : analysis.filters) out.push_back(*TaskFilter::parse(f));
  return out;
}

TaskFilter ExperimentConfig::primary_filter() const {
  auto f = TaskFilter::parse(analysis.primary_filter);
  if (!f) throw ConfigError("config: unknown primary filter '" + analysis.primary_filter + "'");
  return *f;
}

std::vector<Relation> ExperimentConfig::relations() const {
  std::vector<Relation> out;
  for (const auto& r : analysis.relations) out.push_back(*parse_relation(r));
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : purpose) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::vector<std::vector<int>> encode_segments(const Vocabulary& vocab, const std::vector<std::string>& texts) {
  std::vector<std::vector<int>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(vocab.encode(t));
  return out;
}

ExperimentData build_data(const ExperimentConfig& config, const std::filesystem::path& data_dir) {
  config.validate();
  const auto& cc = config.corpus;
  ExperimentData d;
  d.pools = load_pools(data_dir);
  if (cc.templates_per_relation > 0) {
    for (const auto& t : d.pools.templates) {
      if (t.size() < cc.templates_per_relation) {
        throw ConfigError("config: templates_per_relation " + std::to_string(cc.templates_per_relation) +
                          " exceeds the " + std::to_string(t.size()) + " templates available");
      }
    }
  }
  FrequencyParams freq{cc.frequency_scale, cc.frequency_min, cc.frequency_max};
  const std::uint64_t seed = config.seed;

  // Future K_rel entities first meet the model in the base stage with two
  // relations; their city, major and company only arrive in the continual stage.
  const std::size_t n_rel = static_cast<std::size_t>(std::llround(
      static_cast<double>(cc.entities * cc.relevant_parts) / static_cast<double>(cc.relevant_parts + cc.new_parts)));
  Rng name_rng(derive_seed(seed, "anchor-names"));
  const auto anchor_names = draw_names(d.pools, n_rel, {}, name_rng);
  std::unordered_set<std::string> used;
  for (const auto& n : anchor_names) used.insert(n[0] + " " + n[1] + " " + n[2]);

  std::vector<EntityProfile> anchors;
  {
    FrequencyParams fixed{0.0, cc.anchor_frequency, cc.anchor_frequency};
    anchors = generate_entities(d.pools, n_rel, 1, 0, fixed, derive_seed(seed, "anchors"), anchor_names);
  }
  std::vector<EntityProfile> filler;
  if (cc.base_filler > 0) {
    filler = generate_entities(d.pools, cc.base_filler, 0, 1, freq, derive_seed(seed, "filler"), {}, used);
    for (const auto& e : filler) used.insert(e.name());
  }
  const std::vector<Relation> anchor_rel{Relation::BirthDate, Relation::University};
  d.base.entities = anchors;
  d.base.entities.insert(d.base.entities.end(), filler.begin(), filler.end());
  d.base.texts = render_corpus(anchors, d.pools, cc.templates_per_relation, derive_seed(seed, "base-anchor-text"),
                               anchor_rel);
  if (!filler.empty()) {
    auto more = render_corpus(filler, d.pools, cc.templates_per_relation, derive_seed(seed, "base-filler-text"));
    d.base.texts.insert(d.base.texts.end(), more.begin(), more.end());
  }

  d.continual.entities = generate_entities(d.pools, cc.entities, cc.relevant_parts, cc.new_parts, freq,
                                            derive_seed(seed, "continual"), anchor_names, used);
  for (std::size_t i = 0; i < n_rel; ++i) {
    auto& e = d.continual.entities[i];
    for (Relation r : anchor_rel) e.attributes[static_cast<std::size_t>(r)] = anchors[i].attribute(r);
  }
  for (const auto& e : d.continual.entities) used.insert(e.name());
  d.continual.texts =
      render_corpus(d.continual.entities, d.pools, cc.templates_per_relation, derive_seed(seed, "continual-text"));

  if (cc.forget_entities > 0) {
    d.forget.entities =
        generate_entities(d.pools, cc.forget_entities, 0, 1, freq, derive_seed(seed, "forget"), {}, used);
    d.forget.texts =
        render_corpus(d.forget.entities, d.pools, cc.templates_per_relation, derive_seed(seed, "forget-text"));
  }

  std::vector<std::string> vocab_texts = d.base.texts;
  vocab_texts.insert(vocab_texts.end(), d.continual.texts.begin(), d.continual.texts.end());
  vocab_texts.insert(vocab_texts.end(), d.forget.texts.begin(), d.forget.texts.end());
  for (Relation r : kAllRelations) {
    if (is_query_relation(r)) vocab_texts.push_back(render_template(d.pools.templates[static_cast<std::size_t>(r)][0], "", ""));
  }
  d.vocab = Vocabulary::build(vocab_texts);

  const auto relations = config.relations();
  for (const auto& f : config.filters()) {
    d.tasks[f.name()] = make_task_examples(d.continual.entities, d.pools, d.vocab, relations, f, cc.task_examples,
                                           derive_seed(seed, "tasks-" + f.name()));
  }
  return d;
}

}  // namespace kc
