// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "kcircuits/metrics.hpp"
#include "kcircuits/parallel.hpp"

namespace kc {

std::vector<std::uint8_t> Circuit::mask() const {
  std::vector<std::uint8_t> m(graph_edges, 0);
  for (auto e : edges) {
    if (e >= graph_edges) throw std::out_of_range("circuit: edge index outside graph");
    m[e] = 1;
  }
  return m;
}

namespace {

void check_example(const TaskExample& ex, std::size_t vocab) {
  if (ex.clean.empty() || ex.clean.size() != ex.corrupted.size()) {
    throw std::invalid_argument("attribution: clean and corrupted prompts must be nonempty and equally long");
  }
  auto in_vocab = [vocab](int t) { return t >= 0 && static_cast<std::size_t>(t) < vocab; };
  if (!in_vocab(ex.target) || !in_vocab(ex.corrupted_target)) {
    throw std::out_of_range("attribution: target id outside the vocabulary of " + std::to_string(vocab));
  }
}

std::span<const float> last_row(const ad::Tensor& logits) {
  const std::size_t V = logits.dim(1);
  return logits.data().subspan((logits.dim(0) - 1) * V, V);
}

double run_loss(const Model& model, const TaskExample& ex, const RunOptions& opts) {
  return attribution_loss_value(last_row(model.run(ex.clean, opts).logits), ex);
}

void require_frozen(const Model& model) {
  for (const auto& p : model.parameters()) {
    if (p.value.requires_grad()) {
      throw std::logic_error("attribution: parameter " + p.name + " requires grad; freeze the model first");
    }
  }
}

}  // namespace

ad::Tensor attribution_loss(const ad::Tensor& logits, const TaskExample& example) {
  if (logits.rank() != 2 || logits.dim(0) == 0) throw ad::ShapeError("attribution_loss: logits must be (T, vocab)");
  check_example(example, logits.dim(1));
  ad::Tensor last = ad::slice(logits, 0, logits.dim(0) - 1, 1);
  ad::Tensor t = ad::slice(last, 1, static_cast<std::size_t>(example.target), 1);
  ad::Tensor c = ad::slice(last, 1, static_cast<std::size_t>(example.corrupted_target), 1);
  return ad::sum(ad::scale(ad::sub(t, c), -1.0f));
}

double attribution_loss_value(std::span<const float> last_logits, const TaskExample& example) {
  auto in_vocab = [&](int t) { return t >= 0 && static_cast<std::size_t>(t) < last_logits.size(); };
  if (!in_vocab(example.target) || !in_vocab(example.corrupted_target)) {
    throw std::out_of_range("attribution_loss: target id outside the vocabulary");
  }
  return -(static_cast<double>(last_logits[static_cast<std::size_t>(example.target)]) -
           static_cast<double>(last_logits[static_cast<std::size_t>(example.corrupted_target)]));
}

EdgeScores eap_ig_scores(const Model& model, const CompGraph& graph, std::span<const TaskExample> examples,
                         const AttributionOptions& options) {
  if (options.steps == 0) throw std::invalid_argument("eap_ig: m must be at least 1");
  if (examples.empty()) throw std::invalid_argument("eap_ig: no examples");
  if (!graph.same_shape(model.config())) throw std::invalid_argument("eap_ig: graph does not match model config");
  for (const auto& ex : examples) check_example(ex, model.config().vocab_size);
  require_frozen(model);

  const std::size_t E = graph.edge_count(), S = graph.slot_count(), N = graph.node_count();
  const std::size_t m = options.steps;
  std::vector<std::vector<double>> per_example(examples.size());

  parallel_for(examples.size(), options.jobs, [&](std::size_t i) {
    const TaskExample& ex = examples[i];
    const HookState clean = *model.run(ex.clean, {.capture = true}).hooks;
    const HookState corr = *model.run(ex.corrupted, {.capture = true}).hooks;
    const auto emb_clean = clean.node_outputs[graph.input_node()].data();
    const auto emb_corr = corr.node_outputs[graph.input_node()].data();
    const std::size_t n = emb_clean.size();

    std::vector<std::vector<float>> grad(S, std::vector<float>(n, 0.0f));
    for (std::size_t k = 1; k <= m; ++k) {
      const float alpha = static_cast<float>(k) / static_cast<float>(m);
      std::vector<float> interp(n);
      for (std::size_t j = 0; j < n; ++j) interp[j] = emb_corr[j] + alpha * (emb_clean[j] - emb_corr[j]);
      ad::Tensor x = ad::Tensor::from_data(clean.node_outputs[graph.input_node()].shape(), std::move(interp), true);
      ad::Tape tape;
      ad::TapeScope scope(tape);
      RunResult r = model.run(ex.clean, {.capture = true, .embedding = &x});
      tape.backward(attribution_loss(r.logits, ex));
      for (std::size_t s = 0; s < S; ++s) {
        const ad::Tensor& in = r.hooks->slot_inputs[s];
        if (!in.defined() || !in.has_grad()) {
          throw std::logic_error("eap_ig: no gradient captured at slot " + std::to_string(s));
        }
        const auto g = in.grad();
        for (std::size_t j = 0; j < n; ++j) grad[s][j] += g[j];
      }
    }

    std::vector<std::vector<float>> diff(N);
    for (std::size_t u = 0; u + 1 < N; ++u) {
      const auto a = corr.node_outputs[u].data(), b = clean.node_outputs[u].data();
      diff[u].resize(n);
      for (std::size_t j = 0; j < n; ++j) diff[u][j] = a[j] - b[j];
    }
    auto& out = per_example[i];
    out.assign(E, 0.0);
    for (std::size_t e = 0; e < E; ++e) {
      const auto& d = diff[graph.edge_source(e)];
      const auto& g = grad[graph.edge_slot(e)];
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(d[j]) * g[j];
      out[e] = acc / static_cast<double>(m);
    }
  });

  EdgeScores result;
  result.steps = m;
  result.examples = examples.size();
  result.scores.assign(E, 0.0);
  for (const auto& pe : per_example) {
    for (std::size_t e = 0; e < E; ++e) result.scores[e] += pe[e];
  }
  for (auto& s : result.scores) {
    s /= static_cast<double>(examples.size());
    if (!std::isfinite(s)) throw std::runtime_error("eap_ig: non-finite edge score");
  }
  return result;
}

namespace {

std::vector<double> patch_effects(const Model& model, const CompGraph& graph, std::span<const std::size_t> edges,
                                  std::span<const TaskExample> examples, std::size_t jobs) {
  if (examples.empty()) throw std::invalid_argument("patching: no examples");
  if (!graph.same_shape(model.config())) throw std::invalid_argument("patching: graph does not match model config");
  for (const auto& ex : examples) check_example(ex, model.config().vocab_size);
  for (auto e : edges) {
    if (e >= graph.edge_count()) throw std::out_of_range("patching: edge index outside graph");
  }
  std::vector<std::vector<double>> per_example(examples.size());
  parallel_for(examples.size(), jobs, [&](std::size_t i) {
    const TaskExample& ex = examples[i];
    const HookState corr = *model.run(ex.corrupted, {.capture = true}).hooks;
    const double clean_loss = run_loss(model, ex, {});
    std::vector<std::uint8_t> mask(graph.edge_count(), 1);
    auto& out = per_example[i];
    for (auto e : edges) {
      mask[e] = 0;
      PatchSpec patch{&graph, mask, &corr};
      out.push_back(run_loss(model, ex, {.patch = &patch}) - clean_loss);
      mask[e] = 1;
    }
  });
  std::vector<double> effect(edges.size(), 0.0);
  for (const auto& pe : per_example) {
    for (std::size_t k = 0; k < edges.size(); ++k) effect[k] += pe[k];
  }
  for (auto& v : effect) v /= static_cast<double>(examples.size());
  return effect;
}

}  // namespace

double patching_effect(const Model& model, const CompGraph& graph, std::size_t edge,
                       std::span<const TaskExample> examples) {
  const std::size_t one[] = {edge};
  return patch_effects(model, graph, one, examples, 1)[0];
}

std::vector<double> patching_oracle(const Model& model, const CompGraph& graph, std::span<const TaskExample> examples,
                                    std::size_t ceiling, std::size_t jobs) {
  if (graph.edge_count() > ceiling) {
    throw PatchingRefused("patching: graph has " + std::to_string(graph.edge_count()) +
                          " edges, above the exact-patching ceiling of " + std::to_string(ceiling) +
                          "; use EAP-IG scores instead");
  }
  std::vector<std::size_t> all(graph.edge_count());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return patch_effects(model, graph, all, examples, jobs);
}

Circuit extract_circuit(const CompGraph& graph, const EdgeScores& scores, std::size_t n) {
  const std::size_t E = graph.edge_count();
  if (scores.scores.size() != E) {
    throw std::invalid_argument("extract_circuit: " + std::to_string(scores.scores.size()) + " scores for " +
                                std::to_string(E) + " edges");
  }
  if (n > E) throw std::invalid_argument("extract_circuit: n exceeds edge count");
  std::vector<std::size_t> order(E);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(scores.scores[a]) > std::abs(scores.scores[b]);
  });
  Circuit c;
  c.graph_edges = E;
  c.checkpoint = scores.checkpoint;
  c.edges.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(c.edges.begin(), c.edges.end());
  for (auto e : c.edges) {
    c.scores.push_back(scores.scores[e]);
    c.nodes.push_back(graph.edge_source(e));
    c.nodes.push_back(graph.slot_node(graph.edge_slot(e)));
  }
  std::sort(c.nodes.begin(), c.nodes.end());
  c.nodes.erase(std::unique(c.nodes.begin(), c.nodes.end()), c.nodes.end());
  return c;
}

struct CircuitEvaluator::Impl {
  const Model& model;
  CompGraph graph;
  std::vector<TaskExample> examples;
  std::vector<HookState> corrupted;
  std::size_t jobs;

  template <typename Fn>
  CircuitEval ranks_of(Fn&& logits_for) const {
    CircuitEval out;
    out.ranks.resize(examples.size());
    parallel_for(examples.size(), jobs, [&](std::size_t i) {
      out.ranks[i] = rank_of(last_row(logits_for(i)), examples[i].target);
    });
    out.hit_at_10 = hit_at_10(out.ranks);
    return out;
  }
};

CircuitEvaluator::CircuitEvaluator(const Model& model, const CompGraph& graph, std::span<const TaskExample> examples,
                                   std::size_t jobs)
    : impl_(std::make_unique<Impl>(Impl{model, graph, {examples.begin(), examples.end()}, {}, jobs})) {
  if (examples.empty()) throw std::invalid_argument("evaluate_circuit: empty test set");
  if (!graph.same_shape(model.config())) {
    throw std::invalid_argument("evaluate_circuit: graph does not match model config");
  }
  for (const auto& ex : examples) check_example(ex, model.config().vocab_size);
  impl_->corrupted.resize(examples.size());
  parallel_for(examples.size(), jobs, [&](std::size_t i) {
    impl_->corrupted[i] = *model.run(impl_->examples[i].corrupted, {.capture = true}).hooks;
  });
}

CircuitEvaluator::~CircuitEvaluator() = default;

std::size_t CircuitEvaluator::size() const { return impl_->examples.size(); }

CircuitEval CircuitEvaluator::whole_model() const {
  return impl_->ranks_of([&](std::size_t i) { return impl_->model.run(impl_->examples[i].clean).logits; });
}

CircuitEval CircuitEvaluator::corrupted_baseline() const {
  return impl_->ranks_of([&](std::size_t i) { return impl_->model.run(impl_->examples[i].corrupted).logits; });
}

CircuitEval CircuitEvaluator::evaluate(std::span<const std::uint8_t> mask) const {
  if (mask.size() != impl_->graph.edge_count()) {
    throw std::invalid_argument("evaluate_circuit: mask has " + std::to_string(mask.size()) + " flags for " +
                                std::to_string(impl_->graph.edge_count()) + " edges");
  }
  return impl_->ranks_of([&](std::size_t i) {
    PatchSpec patch{&impl_->graph, mask, &impl_->corrupted[i]};
    return impl_->model.run(impl_->examples[i].clean, {.patch = &patch}).logits;
  });
}

CircuitEval CircuitEvaluator::evaluate(const Circuit& circuit) const {
  if (circuit.graph_edges != impl_->graph.edge_count()) {
    throw std::invalid_argument("evaluate_circuit: circuit comes from a graph with " +
                                std::to_string(circuit.graph_edges) + " edges, model graph has " +
                                std::to_string(impl_->graph.edge_count()));
  }
  const auto mask = circuit.mask();
  return evaluate(mask);
}

CircuitEval evaluate_circuit(const Circuit& circuit, const Model& model, std::span<const TaskExample> testset,
                             std::size_t jobs) {
  CompGraph graph(model.config());
  return CircuitEvaluator(model, graph, testset, jobs).evaluate(circuit);
}

Calibration calibrate_edge_budget(const Model& model, const CompGraph& graph, const EdgeScores& scores,
                                  std::span<const TaskExample> examples, double target, std::size_t jobs) {
  if (!(target > 0.0 && target <= 1.0)) throw std::invalid_argument("calibrate: target must lie in (0, 1]");
  const std::size_t E = graph.edge_count();
  CircuitEvaluator eval(model, graph, examples, jobs);
  Calibration cal;
  cal.model_hit_at_10 = eval.whole_model().hit_at_10;
  const std::size_t first = std::min<std::size_t>(16, E);
  if (cal.model_hit_at_10 == 0.0) {
    cal.degenerate = true;
    cal.n = first;
    cal.circuit_hit_at_10 = eval.evaluate(extract_circuit(graph, scores, first)).hit_at_10;
    cal.sweep_n.push_back(first);
    cal.sweep_hit_at_10.push_back(cal.circuit_hit_at_10);
    return cal;
  }
  const double needed = target * cal.model_hit_at_10;
  for (std::size_t n = first;; n = std::min(E, n * 2)) {
    const double hit = eval.evaluate(extract_circuit(graph, scores, n)).hit_at_10;
    cal.sweep_n.push_back(n);
    cal.sweep_hit_at_10.push_back(hit);
    if (hit >= needed) {
      cal.n = n;
      cal.circuit_hit_at_10 = hit;
      return cal;
    }
    if (n == E) break;
  }
  std::ostringstream msg;
  msg << "calibrate: no budget reaches " << needed << " Hit@10 (whole model " << cal.model_hit_at_10 << "); sweep:";
  for (std::size_t i = 0; i < cal.sweep_n.size(); ++i) msg << ' ' << cal.sweep_n[i] << '=' << cal.sweep_hit_at_10[i];
  throw std::runtime_error(msg.str());
}

namespace {

std::string format_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_row(std::ostream& os, const CompGraph& graph, std::size_t e, double score) {
  const EdgeId id = graph.edge(e);
  os << node_name(id.source) << '\t' << node_name(id.destination) << '\t' << channel_name(id.channel) << '\t'
     << format_score(score) << '\n';
}

constexpr const char* kHeader = "source\tdestination\tchannel\tscore";

struct ParsedTable {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::size_t, double>> rows;
};

ParsedTable parse_table(std::istream& is, const CompGraph& graph, const char* what) {
  ParsedTable t;
  std::string line;
  bool header = false;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw std::runtime_error(std::string(what) + " line " + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail("metadata needs key=value");
      std::string key = line.substr(1, eq - 1);
      key.erase(0, key.find_first_not_of(' '));
      t.meta[key] = line.substr(eq + 1);
      continue;
    }
    if (!header) {
      if (line != kHeader) fail("expected header '" + std::string(kHeader) + "'");
      header = true;
      continue;
    }
    std::istringstream row(line);
    std::string src, dst, ch, score;
    if (!std::getline(row, src, '\t') || !std::getline(row, dst, '\t') || !std::getline(row, ch, '\t') ||
        !std::getline(row, score)) {
      fail("expected four tab-separated columns");
    }
    auto s = parse_node(src);
    auto d = parse_node(dst);
    auto c = parse_channel(ch);
    if (!s || !d || !c) fail("unparseable edge '" + line + "'");
    std::size_t idx = 0;
    try {
      idx = graph.edge_index({*s, *d, *c});
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(score, &used);
      if (used != score.size()) fail("bad score '" + score + "'");
    } catch (const std::logic_error&) {
      fail("bad score '" + score + "'");
    }
    if (!std::isfinite(v)) fail("non-finite score");
    t.rows.emplace_back(idx, v);
  }
  if (!header) throw std::runtime_error(std::string(what) + ": missing header row");
  for (std::size_t i = 1; i < t.rows.size(); ++i) {
    if (t.rows[i].first <= t.rows[i - 1].first) {
      throw std::runtime_error(std::string(what) + ": rows are not in canonical edge order");
    }
  }
  return t;
}

std::size_t meta_size(const ParsedTable& t, const std::string& key) {
  auto it = t.meta.find(key);
  if (it == t.meta.end()) return 0;
  return static_cast<std::size_t>(std::stoull(it->second));
}

std::string meta_str(const ParsedTable& t, const std::string& key) {
  auto it = t.meta.find(key);
  return it == t.meta.end() ? std::string() : it->second;
}

}  // namespace

void write_edge_scores(std::ostream& os, const CompGraph& graph, const EdgeScores& scores) {
  if (scores.scores.size() != graph.edge_count()) throw std::invalid_argument("write_edge_scores: size mismatch");
  os << "# kind=edge_scores\n# steps=" << scores.steps << "\n# examples=" << scores.examples
     << "\n# checkpoint=" << scores.checkpoint << "\n# position_contraction=" << scores.position_contraction
     << "\n# edges=" << graph.edge_count() << '\n'
     << kHeader << '\n';
  for (std::size_t e = 0; e < graph.edge_count(); ++e) write_row(os, graph, e, scores.scores[e]);
}

EdgeScores read_edge_scores(std::istream& is, const CompGraph& graph) {
  ParsedTable t = parse_table(is, graph, "edge scores");
  if (t.rows.size() != graph.edge_count()) {
    throw std::runtime_error("edge scores: " + std::to_string(t.rows.size()) + " rows for " +
                             std::to_string(graph.edge_count()) + " edges");
  }
  EdgeScores s;
  s.steps = meta_size(t, "steps");
  s.examples = meta_size(t, "examples");
  s.checkpoint = meta_str(t, "checkpoint");
  if (auto pc = meta_str(t, "position_contraction"); !pc.empty()) s.position_contraction = pc;
  for (const auto& [e, v] : t.rows) s.scores.push_back(v);
  return s;
}

void write_circuit(std::ostream& os, const CompGraph& graph, const Circuit& circuit) {
  if (circuit.graph_edges != graph.edge_count()) throw std::invalid_argument("write_circuit: graph mismatch");
  os << "# kind=circuit\n# n=" << circuit.size() << "\n# edges=" << circuit.graph_edges
     << "\n# checkpoint=" << circuit.checkpoint << "\n# filter=" << circuit.filter << "\n# nodes=";
  for (std::size_t i = 0; i < circuit.nodes.size(); ++i) {
    os << (i ? "," : "") << node_name(graph.nodes()[circuit.nodes[i]]);
  }
  os << '\n' << kHeader << '\n';
  for (std::size_t i = 0; i < circuit.edges.size(); ++i) write_row(os, graph, circuit.edges[i], circuit.scores[i]);
}

Circuit read_circuit(std::istream& is, const CompGraph& graph) {
  ParsedTable t = parse_table(is, graph, "circuit");
  Circuit c;
  c.graph_edges = graph.edge_count();
  if (auto declared = meta_size(t, "edges"); declared != 0 && declared != c.graph_edges) {
    throw std::runtime_error("circuit: cut from a graph with " + std::to_string(declared) + " edges, expected " +
                             std::to_string(c.graph_edges));
  }
  if (t.meta.count("n") && meta_size(t, "n") != t.rows.size()) {
    throw std::runtime_error("circuit: n does not match the number of rows");
  }
  c.checkpoint = meta_str(t, "checkpoint");
  c.filter = meta_str(t, "filter");
  for (const auto& [e, v] : t.rows) {
    c.edges.push_back(e);
    c.scores.push_back(v);
    c.nodes.push_back(graph.edge_source(e));
    c.nodes.push_back(graph.slot_node(graph.edge_slot(e)));
  }
  std::sort(c.nodes.begin(), c.nodes.end());
  c.nodes.erase(std::unique(c.nodes.begin(), c.nodes.end()), c.nodes.end());
  return c;
}

}  // namespace kc
