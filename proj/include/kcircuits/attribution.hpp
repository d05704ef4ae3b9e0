// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// Edge attribution with integrated gradients (EAP-IG), an exact activation
// patching reference, top-n circuit extraction and ablated circuit evaluation.
// Out-of-circuit edges always carry the corrupted run's source contribution.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kcircuits/corpus.hpp"
#include "kcircuits/graph.hpp"
#include "kcircuits/model.hpp"

namespace kc {

/// One score per graph edge, in canonical edge order.
struct EdgeScores {
  std::vector<double> scores;
  std::size_t steps = 0;     // m
  std::size_t examples = 0;
  std::string checkpoint;
  /// How the dot product contracts positions; always "sum" here.
  std::string position_contraction = "sum";
};

struct Circuit {
  std::vector<std::size_t> edges;   // canonical order
  std::vector<std::size_t> nodes;   // endpoints of `edges`, ascending
  std::vector<double> scores;       // parallel to `edges`
  std::size_t graph_edges = 0;      // |E| of the graph it was cut from
  std::string checkpoint;
  std::string filter;

  std::size_t size() const { return edges.size(); }
  /// One flag per graph edge.
  std::vector<std::uint8_t> mask() const;
};

/// −(logit[target] − logit[corrupted_target]) at the last position of
/// `logits` (T, vocab). Differentiable when `logits` is on a tape.
ad::Tensor attribution_loss(const ad::Tensor& logits, const TaskExample& example);
double attribution_loss_value(std::span<const float> last_logits, const TaskExample& example);

struct AttributionOptions {
  std::size_t steps = 5;  // m
  std::size_t jobs = 1;
};

/// Throws std::invalid_argument on m = 0, no examples, or a length mismatch.
/// The model's parameters must not require gradients.
EdgeScores eap_ig_scores(const Model& model, const CompGraph& graph, std::span<const TaskExample> examples,
                         const AttributionOptions& options = {});

class PatchingRefused : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kPatchingEdgeCeiling = 4096;

/// Exact effect of corrupting one edge: mean over examples of
/// L(every edge but `edge` in circuit) − L(clean).
double patching_effect(const Model& model, const CompGraph& graph, std::size_t edge,
                       std::span<const TaskExample> examples);

/// patching_effect for every edge. Throws PatchingRefused when the graph has
/// more than `ceiling` edges.
std::vector<double> patching_oracle(const Model& model, const CompGraph& graph, std::span<const TaskExample> examples,
                                    std::size_t ceiling = kPatchingEdgeCeiling, std::size_t jobs = 1);

/// The n edges of largest |score|, ties broken by canonical order.
Circuit extract_circuit(const CompGraph& graph, const EdgeScores& scores, std::size_t n);

struct CircuitEval {
  double hit_at_10 = 0.0;
  std::vector<std::size_t> ranks;  // rank of the clean target, per example
};

/// Holds the corrupted activations of a test set under one set of weights, so
/// many circuits can be evaluated against the same model.
class CircuitEvaluator {
 public:
  CircuitEvaluator(const Model& model, const CompGraph& graph, std::span<const TaskExample> examples,
                   std::size_t jobs = 1);
  ~CircuitEvaluator();
  CircuitEvaluator(const CircuitEvaluator&) = delete;
  CircuitEvaluator& operator=(const CircuitEvaluator&) = delete;

  /// Clean, unpatched model.
  CircuitEval whole_model() const;
  /// Corrupted inputs, i.e. the empty circuit.
  CircuitEval corrupted_baseline() const;
  CircuitEval evaluate(std::span<const std::uint8_t> mask) const;
  /// Throws std::invalid_argument when the circuit was cut from another graph shape.
  CircuitEval evaluate(const Circuit& circuit) const;
  std::size_t size() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

CircuitEval evaluate_circuit(const Circuit& circuit, const Model& model, std::span<const TaskExample> testset,
                             std::size_t jobs = 1);

struct Calibration {
  std::size_t n = 0;
  double circuit_hit_at_10 = 0.0;
  double model_hit_at_10 = 0.0;
  bool degenerate = false;  // whole-model Hit@10 was 0
  std::vector<std::size_t> sweep_n;
  std::vector<double> sweep_hit_at_10;
};

/// Smallest n in 16, 32, 64, ... (capped at |E|) whose circuit reaches
/// target × whole-model Hit@10. Throws std::invalid_argument for target
/// outside (0, 1], std::runtime_error if even the full graph falls short.
Calibration calibrate_edge_budget(const Model& model, const CompGraph& graph, const EdgeScores& scores,
                                  std::span<const TaskExample> examples, double target = 0.70,
                                  std::size_t jobs = 1);

/// Tab-separated: "# key=value" metadata lines, a header row, then one row
/// per edge (source, destination, channel, score).
void write_edge_scores(std::ostream& os, const CompGraph& graph, const EdgeScores& scores);
EdgeScores read_edge_scores(std::istream& is, const CompGraph& graph);
void write_circuit(std::ostream& os, const CompGraph& graph, const Circuit& circuit);
Circuit read_circuit(std::istream& is, const CompGraph& graph);

}  // namespace kc
