// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "kcircuits/attribution.hpp"
#include "kcircuits/metrics.hpp"

namespace kc {

/// H(C) over the circuit's retained scores.
double circuit_entropy(const Circuit& circuit);
double jaccard_edges(const Circuit& a, const Circuit& b);
double jaccard_nodes(const Circuit& a, const Circuit& b);

/// Centered moving average. Near the ends the window shrinks symmetrically,
/// so the first and last points are kept and linear data is unchanged.
std::vector<double> smooth(std::span<const double> values, std::size_t window = 3);

struct PhaseShift {
  std::size_t breakpoint = 0;  // index into the series
  double slope_before = 0.0;
  double slope_after = 0.0;
  double squared_error = 0.0;
  bool shift = false;  // |slope_before| >= 2 |slope_after|
};

/// Smooths the series, then fits a continuous two-segment line y = c +
/// s1 min(x - b, 0) + s2 max(x - b, 0) for every interior b and keeps the
/// least-squares best. Throws std::invalid_argument on fewer than 5 points.
PhaseShift detect_phase_shift(std::span<const double> values, std::size_t window = 3);

/// Share of each layer's outgoing edges that the circuit keeps. `input` is
/// the embedding row; `layers` covers every layer except the last.
struct ActivationRatios {
  double input = 0.0;
  std::vector<double> layers;
};
ActivationRatios edge_activation_ratio(const Circuit& circuit, const CompGraph& graph);

enum class HeadKind { Mover, Relation, Mixture };
std::string head_kind_name(HeadKind kind);

inline constexpr double kHeadTau = 10.0;

struct HeadClass {
  NodeId head;
  double dla_subject = 0.0;
  double dla_relation = 0.0;
  double ratio = 0.0;  // |dla_subject / dla_relation|; infinite when the denominator is 0
  HeadKind kind = HeadKind::Mixture;
  bool degenerate = false;  // zero denominator
};

/// Ratio rule: Mover above tau, Relation below 1/tau, Mixture otherwise.
HeadClass classify_ratio(double dla_subject, double dla_relation, double tau = kHeadTau);

/// Direct logit attribution of every head's last-position output, split into
/// the parts read from subject and relation tokens and projected onto the
/// target's logit, summed over examples.
std::vector<HeadClass> classify_heads(const Model& model, std::span<const TaskExample> examples,
                                      double tau = kHeadTau, bool apply_final_norm = true);

/// Per layer: number of heads of each kind.
struct HeadCounts {
  std::vector<std::array<std::size_t, 3>> per_layer;  // indexed by HeadKind
  std::size_t total(HeadKind kind) const;
};
HeadCounts count_heads(std::span<const HeadClass> heads, std::size_t n_layers);

struct LensPoint {
  std::size_t layer = 0;  // residual boundary: 0 is the embedding, n_layers the final stream
  double median_rank = 0.0;
  double mean_probability = 0.0;
};

/// Target rank and probability when each layer boundary's last-position
/// residual is unembedded directly.
std::vector<LensPoint> logit_lens_trace(const Model& model, std::span<const TaskExample> examples,
                                        bool apply_final_norm = true);

struct Accuracies {
  double first_token = 0.0;
  double query = 0.0;  // exact greedy match of the whole attribute
};
Accuracies whole_model_accuracies(const Model& model, std::span<const TaskExample> examples);

/// matrix[i][j]: circuit i evaluated on test set j.
std::vector<std::vector<double>> transfer_matrix(const Model& model, std::span<const Circuit> circuits,
                                                 std::span<const std::vector<TaskExample>> testsets,
                                                 std::size_t jobs = 1);

struct MetricsRow {
  std::string stage;
  std::size_t epoch = 0;
  std::string filter;
  std::size_t edges = 0;
  double hit_at_10 = 0.0;
  double model_hit_at_10 = 0.0;
  double circuit_entropy = 0.0;
  double jaccard_edges_vs_final = 0.0;
  double jaccard_nodes_vs_final = 0.0;
  ActivationRatios activation;
  HeadCounts heads;
  double first_token_accuracy = 0.0;
  double query_accuracy = 0.0;
};

/// One header comment naming the conventions, a column header, then rows.
void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows, std::size_t n_layers);

struct LensRow {
  std::string stage;
  std::size_t epoch = 0;
  std::string filter;
  LensPoint point;
};
void write_lens_csv(std::ostream& os, std::span<const LensRow> rows);

}  // namespace kc
