// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace kc {

double circuit_entropy(const Circuit& circuit) { return circuit_entropy(std::span<const double>(circuit.scores)); }

double jaccard_edges(const Circuit& a, const Circuit& b) { return jaccard(a.edges, b.edges); }
double jaccard_nodes(const Circuit& a, const Circuit& b) { return jaccard(a.nodes, b.nodes); }

std::vector<double> smooth(std::span<const double> values, std::size_t window) {
  if (window == 0 || window % 2 == 0) throw std::invalid_argument("smooth: window must be odd");
  const std::size_t half = window / 2;
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t w = std::min({half, i, values.size() - 1 - i});
    const std::size_t lo = i - w, hi = i + w;
    double s = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) s += values[j];
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

namespace {

// Solves the 3x3 system a x = b by Gaussian elimination with partial pivoting.
bool solve3(std::array<std::array<double, 3>, 3> a, std::array<double, 3> b, std::array<double, 3>& x) {
  for (int c = 0; c < 3; ++c) {
    int piv = c;
    for (int r = c + 1; r < 3; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    }
    if (std::abs(a[piv][c]) < 1e-12) return false;
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (int r = c + 1; r < 3; ++r) {
      const double f = a[r][c] / a[c][c];
      for (int k = c; k < 3; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  for (int r = 2; r >= 0; --r) {
    double s = b[r];
    for (int k = r + 1; k < 3; ++k) s -= a[r][k] * x[k];
    x[r] = s / a[r][r];
  }
  return true;
}

}  // namespace

PhaseShift detect_phase_shift(std::span<const double> values, std::size_t window) {
  if (values.size() < 5) throw std::invalid_argument("detect_phase_shift: need at least 5 points");
  const auto y = smooth(values, window);
  const std::size_t n = y.size();
  PhaseShift best;
  best.squared_error = std::numeric_limits<double>::infinity();
  for (std::size_t b = 1; b + 1 < n; ++b) {
    std::array<std::array<double, 3>, 3> ata{};
    std::array<double, 3> aty{};
    auto row = [&](std::size_t i) {
      const double d = static_cast<double>(i) - static_cast<double>(b);
      return std::array<double, 3>{1.0, std::min(d, 0.0), std::max(d, 0.0)};
    };
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = row(i);
      for (int p = 0; p < 3; ++p) {
        aty[p] += r[p] * y[i];
        for (int q = 0; q < 3; ++q) ata[p][q] += r[p] * r[q];
      }
    }
    std::array<double, 3> coef{};
    if (!solve3(ata, aty, coef)) continue;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = row(i);
      const double e = y[i] - (coef[0] + coef[1] * r[1] + coef[2] * r[2]);
      sse += e * e;
    }
    if (sse < best.squared_error - 1e-12) {
      best.breakpoint = b;
      best.slope_before = coef[1];
      best.slope_after = coef[2];
      best.squared_error = sse;
    }
  }
  best.shift = std::abs(best.slope_before) >= 2.0 * std::abs(best.slope_after) && best.slope_before != 0.0;
  return best;
}

ActivationRatios edge_activation_ratio(const Circuit& circuit, const CompGraph& graph) {
  if (circuit.graph_edges != graph.edge_count()) {
    throw std::invalid_argument("edge_activation_ratio: circuit comes from another graph");
  }
  const std::size_t L = graph.n_layers();
  // Row 0 is the Input node, row l + 1 is layer l.
  std::vector<std::size_t> total(L + 1, 0), kept(L + 1, 0);
  auto row_of = [&](std::size_t e) {
    return static_cast<std::size_t>(layer_of(graph.nodes()[graph.edge_source(e)]) + 1);
  };
  for (std::size_t e = 0; e < graph.edge_count(); ++e) ++total[row_of(e)];
  for (auto e : circuit.edges) ++kept[row_of(e)];
  auto ratio = [&](std::size_t r) {
    return total[r] ? static_cast<double>(kept[r]) / static_cast<double>(total[r]) : 0.0;
  };
  ActivationRatios out;
  out.input = ratio(0);
  for (std::size_t l = 0; l + 1 < L; ++l) out.layers.push_back(ratio(l + 1));
  return out;
}

std::string head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::Mover: return "mover";
    case HeadKind::Relation: return "relation";
    case HeadKind::Mixture: return "mixture";
  }
  return "?";
}

HeadClass classify_ratio(double dla_subject, double dla_relation, double tau) {
  if (!(tau > 1.0)) throw std::invalid_argument("classify_ratio: tau must exceed 1");
  HeadClass c;
  c.dla_subject = dla_subject;
  c.dla_relation = dla_relation;
  if (dla_relation == 0.0) {
    c.degenerate = true;
    c.ratio = dla_subject == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    c.kind = dla_subject == 0.0 ? HeadKind::Mixture : HeadKind::Mover;
    return c;
  }
  c.ratio = std::abs(dla_subject / dla_relation);
  if (c.ratio > tau) {
    c.kind = HeadKind::Mover;
  } else if (c.ratio < 1.0 / tau) {
    c.kind = HeadKind::Relation;
  } else {
    c.kind = HeadKind::Mixture;
  }
  return c;
}

std::vector<HeadClass> classify_heads(const Model& model, std::span<const TaskExample> examples, double tau,
                                      bool apply_final_norm) {
  const auto& cfg = model.config();
  const std::size_t L = cfg.n_layers, H = cfg.n_heads, d = cfg.d_model;
  std::vector<double> subj(L * H, 0.0), rel(L * H, 0.0);
  for (const auto& ex : examples) {
    const std::size_t T = ex.clean.size();
    if (ex.subject_end > T || ex.relation_end > T || ex.subject_begin > ex.subject_end ||
        ex.relation_begin > ex.relation_end) {
      throw std::invalid_argument("classify_heads: token spans fall outside the prompt");
    }
    const HookState hooks = *model.run(ex.clean, {.capture = true}).hooks;
    const auto final_resid = hooks.residuals.back().data().subspan((T - 1) * d, d);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        const auto parts = model.head_source_contributions(hooks, l, h, T - 1);
        auto group = [&](std::size_t lo, std::size_t hi) {
          std::vector<float> v(d, 0.0f);
          for (std::size_t j = lo; j < hi; ++j) {
            for (std::size_t k = 0; k < d; ++k) v[k] += parts[j * d + k];
          }
          return model.direct_logit(v, ex.target, final_resid, apply_final_norm);
        };
        subj[l * H + h] += group(ex.subject_begin, ex.subject_end);
        rel[l * H + h] += group(ex.relation_begin, ex.relation_end);
      }
    }
  }
  std::vector<HeadClass> out;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      HeadClass c = classify_ratio(subj[l * H + h], rel[l * H + h], tau);
      c.head = NodeId::attn_head(static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h));
      out.push_back(c);
    }
  }
  return out;
}

std::size_t HeadCounts::total(HeadKind kind) const {
  std::size_t n = 0;
  for (const auto& row : per_layer) n += row[static_cast<std::size_t>(kind)];
  return n;
}

HeadCounts count_heads(std::span<const HeadClass> heads, std::size_t n_layers) {
  HeadCounts c;
  c.per_layer.assign(n_layers, {0, 0, 0});
  for (const auto& h : heads) {
    if (h.head.layer >= n_layers) throw std::out_of_range("count_heads: head layer outside model");
    ++c.per_layer[h.head.layer][static_cast<std::size_t>(h.kind)];
  }
  return c;
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double softmax_probability(std::span<const float> logits, int token) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (float v : logits) z += std::exp(static_cast<double>(v) - mx);
  return std::exp(static_cast<double>(logits[static_cast<std::size_t>(token)]) - mx) / z;
}

std::span<const float> last_row(const ad::Tensor& logits) {
  const std::size_t V = logits.dim(1);
  return logits.data().subspan((logits.dim(0) - 1) * V, V);
}

}  // namespace

std::vector<LensPoint> logit_lens_trace(const Model& model, std::span<const TaskExample> examples,
                                        bool apply_final_norm) {
  const std::size_t L = model.config().n_layers, d = model.config().d_model;
  std::vector<std::vector<double>> ranks(L + 1), probs(L + 1);
  for (const auto& ex : examples) {
    const std::size_t T = ex.clean.size();
    const HookState hooks = *model.run(ex.clean, {.capture = true}).hooks;
    for (std::size_t l = 0; l <= L; ++l) {
      const auto logits = model.unembed_residual(hooks.residuals[l].data().subspan((T - 1) * d, d), apply_final_norm);
      ranks[l].push_back(static_cast<double>(rank_of(logits, ex.target)));
      probs[l].push_back(softmax_probability(logits, ex.target));
    }
  }
  std::vector<LensPoint> out;
  for (std::size_t l = 0; l <= L; ++l) {
    LensPoint p;
    p.layer = l;
    p.median_rank = median(ranks[l]);
    double s = 0.0;
    for (double v : probs[l]) s += v;
    p.mean_probability = probs[l].empty() ? 0.0 : s / static_cast<double>(probs[l].size());
    out.push_back(p);
  }
  return out;
}

Accuracies whole_model_accuracies(const Model& model, std::span<const TaskExample> examples) {
  if (examples.empty()) throw std::invalid_argument("whole_model_accuracies: no examples");
  auto argmax = [](std::span<const float> v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  };
  std::size_t first = 0, exact = 0;
  for (const auto& ex : examples) {
    if (ex.attribute_tokens.empty()) throw std::invalid_argument("whole_model_accuracies: example has no attribute");
    std::vector<int> ctx = ex.clean;
    bool match = true;
    for (std::size_t i = 0; i < ex.attribute_tokens.size(); ++i) {
      if (ctx.size() > model.config().max_context) {
        match = false;
        break;
      }
      const int next = argmax(last_row(model.run(ctx).logits));
      if (i == 0) first += next == ex.attribute_tokens[0];
      if (next != ex.attribute_tokens[i]) {
        match = false;
        break;
      }
      ctx.push_back(next);
    }
    exact += match;
  }
  const double n = static_cast<double>(examples.size());
  return {static_cast<double>(first) / n, static_cast<double>(exact) / n};
}

std::vector<std::vector<double>> transfer_matrix(const Model& model, std::span<const Circuit> circuits,
                                                 std::span<const std::vector<TaskExample>> testsets,
                                                 std::size_t jobs) {
  CompGraph graph(model.config());
  std::vector<std::vector<double>> m(circuits.size(), std::vector<double>(testsets.size(), 0.0));
  for (std::size_t j = 0; j < testsets.size(); ++j) {
    CircuitEvaluator eval(model, graph, testsets[j], jobs);
    for (std::size_t i = 0; i < circuits.size(); ++i) m[i][j] = eval.evaluate(circuits[i]).hit_at_10;
  }
  return m;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows, std::size_t n_layers) {
  os << "# entropy_log=natural; entropy_scores=absolute; activation_rows=input,layer0..layer" << n_layers - 1
     << " (last layer excluded); head_dla=target_logit\n";
  os << "stage,epoch,filter,edges,hit_at_10,model_hit_at_10,circuit_entropy,jaccard_edges_vs_final,"
        "jaccard_nodes_vs_final,first_token_accuracy,query_accuracy,activation_input";
  for (std::size_t l = 0; l + 1 < n_layers; ++l) os << ",activation_l" << l;
  for (std::size_t l = 0; l < n_layers; ++l) os << ",mover_l" << l << ",relation_l" << l << ",mixture_l" << l;
  os << '\n';
  for (const auto& r : rows) {
    os << r.stage << ',' << r.epoch << ',' << r.filter << ',' << r.edges << ',' << fmt(r.hit_at_10) << ','
       << fmt(r.model_hit_at_10) << ',' << fmt(r.circuit_entropy) << ',' << fmt(r.jaccard_edges_vs_final) << ','
       << fmt(r.jaccard_nodes_vs_final) << ',' << fmt(r.first_token_accuracy) << ',' << fmt(r.query_accuracy) << ','
       << fmt(r.activation.input);
    for (std::size_t l = 0; l + 1 < n_layers; ++l) {
      os << ',' << fmt(l < r.activation.layers.size() ? r.activation.layers[l] : 0.0);
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t k = 0; k < 3; ++k) os << ',' << (l < r.heads.per_layer.size() ? r.heads.per_layer[l][k] : 0);
    }
    os << '\n';
  }
}

void write_lens_csv(std::ostream& os, std::span<const LensRow> rows) {
  os << "# rank=median over examples; probability=mean over examples\n";
  os << "stage,epoch,filter,layer,rank,probability\n";
  for (const auto& r : rows) {
    os << r.stage << ',' << r.epoch << ',' << r.filter << ',' << r.point.layer << ',' << fmt(r.point.median_rank)
       << ',' << fmt(r.point.mean_probability) << '\n';
  }
}

}  // namespace kc
