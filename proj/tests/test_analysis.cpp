// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "kcircuits/analysis.hpp"
#include "kcircuits/training.hpp"

namespace {

kc::ModelConfig tiny(std::size_t layers = 2, std::size_t heads = 2) {
  kc::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = 8;
  c.d_mlp = 16;
  c.vocab_size = 13;
  c.max_context = 16;
  return c;
}

kc::Model perturbed(std::uint64_t seed = 3) {
  kc::Model m(tiny(), seed);
  std::uint64_t k = 0;
  for (auto& p : m.parameters()) {
    for (float& v : p.value.data()) v += 0.2f * std::sin(0.37f * static_cast<float>(k++));
  }
  return m;
}

kc::TaskExample example(std::vector<int> clean, std::vector<int> corrupted, int target, int corrupted_target) {
  kc::TaskExample ex;
  ex.clean = std::move(clean);
  ex.corrupted = std::move(corrupted);
  ex.target = target;
  ex.corrupted_target = corrupted_target;
  ex.attribute_tokens = {target};
  ex.subject_begin = 1;
  ex.subject_end = 3;
  ex.relation_begin = 3;
  ex.relation_end = ex.clean.size();
  return ex;
}

std::vector<kc::TaskExample> examples() {
  return {example({2, 4, 5, 9, 10}, {2, 6, 7, 9, 10}, 11, 12), example({2, 6, 7, 9, 3}, {2, 4, 5, 9, 3}, 12, 11),
          example({2, 8, 4, 10, 9}, {2, 5, 6, 10, 9}, 3, 7)};
}

kc::Circuit circuit_of(const kc::CompGraph& g, std::vector<std::size_t> edges, std::vector<double> scores = {}) {
  kc::Circuit c;
  c.graph_edges = g.edge_count();
  c.edges = std::move(edges);
  c.scores = scores.empty() ? std::vector<double>(c.edges.size(), 1.0) : std::move(scores);
  std::set<std::size_t> nodes;
  for (auto e : c.edges) {
    nodes.insert(g.edge_source(e));
    nodes.insert(g.slot_node(g.edge_slot(e)));
  }
  c.nodes.assign(nodes.begin(), nodes.end());
  return c;
}

}  // namespace

TEST(Metrics, HitAt10) {
  std::vector<std::size_t> a{1, 1, 1}, b{10, 11}, c{3, 11, 7};
  EXPECT_DOUBLE_EQ(kc::hit_at_10(a), 1.0);
  EXPECT_DOUBLE_EQ(kc::hit_at_10(b), 0.5);
  EXPECT_DOUBLE_EQ(kc::hit_at_10(c), 2.0 / 3.0);
  EXPECT_THROW(kc::hit_at_10(std::vector<std::size_t>{}), std::invalid_argument);
}

TEST(Metrics, RankIsInvariantUnderMonotoneTransform) {
  std::vector<float> logits{0.3f, -1.0f, 2.5f, 0.3f, 1.0f};
  std::vector<float> warped;
  for (float v : logits) warped.push_back(std::exp(2.0f * v) + 1.0f);
  for (int t = 0; t < 5; ++t) EXPECT_EQ(kc::rank_of(logits, t), kc::rank_of(warped, t));
  EXPECT_EQ(kc::rank_of(logits, 2), 1u);
  EXPECT_EQ(kc::rank_of(logits, 0), 3u);  // ties share the better rank
  EXPECT_EQ(kc::rank_of(logits, 1), 5u);
}

TEST(Metrics, Jaccard) {
  std::vector<std::size_t> abc{1, 2, 3}, bcd{2, 3, 4}, xyz{7, 8}, none;
  EXPECT_DOUBLE_EQ(kc::jaccard(abc, abc), 1.0);
  EXPECT_DOUBLE_EQ(kc::jaccard(abc, xyz), 0.0);
  EXPECT_DOUBLE_EQ(kc::jaccard(abc, bcd), 0.5);
  EXPECT_DOUBLE_EQ(kc::jaccard(none, none), 1.0);
  std::mt19937 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::set<std::size_t> a, b;
    for (int i = 0; i < 10; ++i) {
      a.insert(rng() % 20);
      b.insert(rng() % 20);
    }
    std::vector<std::size_t> va(a.begin(), a.end()), vb(b.begin(), b.end());
    std::vector<std::size_t> inter, uni;
    std::set_intersection(va.begin(), va.end(), vb.begin(), vb.end(), std::back_inserter(inter));
    std::set_union(va.begin(), va.end(), vb.begin(), vb.end(), std::back_inserter(uni));
    const double j = kc::jaccard(va, vb);
    EXPECT_DOUBLE_EQ(j, kc::jaccard(vb, va));
    EXPECT_DOUBLE_EQ(j, static_cast<double>(inter.size()) / static_cast<double>(uni.size()));
  }
}

TEST(Metrics, EntropyClosedForms) {
  for (std::size_t n : {1u, 4u, 17u, 1000u}) {
    std::vector<double> s(n, -0.25);
    EXPECT_NEAR(kc::circuit_entropy(s), std::log(static_cast<double>(n)), 1e-9);
  }
  EXPECT_NEAR(kc::circuit_entropy(std::vector<double>{1.0, 0.0, 0.0}), 0.0, 1e-12);
  EXPECT_NEAR(kc::circuit_entropy(std::vector<double>{2.0, -1.0, 1.0}), 0.5 * std::log(2.0) + 0.5 * std::log(4.0),
              1e-12);
  EXPECT_THROW(kc::circuit_entropy(std::vector<double>{0.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(kc::circuit_entropy(std::vector<double>{}), std::invalid_argument);
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(30);
    for (auto& v : s) v = u(rng);
    const double h = kc::circuit_entropy(s);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(30.0) + 1e-12);
  }
}

TEST(Metrics, SpearmanKnownValues) {
  std::vector<double> x{1, 2, 3, 4, 5}, y{5, 6, 7, 8, 7}, rev{5, 4, 3, 2, 1};
  EXPECT_NEAR(kc::spearman(x, rev), -1.0, 1e-12);
  // Ranks of y: 1, 2, 3.5, 5, 3.5 -> Pearson on ranks by hand.
  EXPECT_NEAR(kc::spearman(x, y), 0.82078268166812329, 1e-12);
}

TEST(Analysis, SmoothingWindow3) {
  std::vector<double> v{3, 6, 0, 9, 3};
  auto s = kc::smooth(v, 3);
  std::vector<double> expect{3.0, 3.0, 5.0, 4.0, 3.0};
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(s[i], expect[i]);
  EXPECT_THROW(kc::smooth(v, 2), std::invalid_argument);
}

TEST(Analysis, PhaseShiftAtJunction) {
  std::vector<double> y;
  for (int i = 0; i <= 5; ++i) y.push_back(10.0 - i);
  for (int i = 1; i <= 8; ++i) y.push_back(5.0 - 0.1 * i);
  auto p = kc::detect_phase_shift(y);
  EXPECT_EQ(p.breakpoint, 5u);
  EXPECT_TRUE(p.shift);
  EXPECT_NEAR(p.slope_before, -1.0, 0.1);
  EXPECT_NEAR(p.slope_after, -0.1, 0.1);
}

TEST(Analysis, LinearSeriesHasNoShift) {
  std::vector<double> y;
  for (int i = 0; i < 12; ++i) y.push_back(3.0 - 0.2 * i);
  auto p = kc::detect_phase_shift(y);
  EXPECT_FALSE(p.shift);
  EXPECT_NEAR(p.slope_before, p.slope_after, 1e-6);
  EXPECT_THROW(kc::detect_phase_shift(std::vector<double>{1, 2, 3, 4}), std::invalid_argument);
}

TEST(Analysis, ActivationRatioOneLayerToy) {
  kc::CompGraph g(tiny(1, 1));
  ASSERT_EQ(g.edge_count(), 8u);
  const std::size_t e = *g.find_edge(g.input_node(), g.head_slot(0, 0, kc::Channel::Q));
  auto r = kc::edge_activation_ratio(circuit_of(g, {e}), g);
  EXPECT_DOUBLE_EQ(r.input, 1.0 / 5.0);
  EXPECT_TRUE(r.layers.empty());
}

TEST(Analysis, ActivationRatioFullEmptyAndMonotone) {
  kc::CompGraph g(tiny(3, 2));
  std::vector<std::size_t> all(g.edge_count());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto full = kc::edge_activation_ratio(circuit_of(g, all), g);
  auto empty = kc::edge_activation_ratio(circuit_of(g, {}), g);
  ASSERT_EQ(full.layers.size(), 2u);
  EXPECT_EQ(full.input, 1.0);
  EXPECT_EQ(empty.input, 0.0);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(full.layers[l], 1.0);
    EXPECT_EQ(empty.layers[l], 0.0);
  }
  std::vector<std::size_t> sub, super;
  for (std::size_t e = 0; e < g.edge_count(); ++e) {
    if (e % 3 == 0) sub.push_back(e);
    if (e % 3 == 0 || e % 5 == 0) super.push_back(e);
  }
  auto a = kc::edge_activation_ratio(circuit_of(g, sub), g), b = kc::edge_activation_ratio(circuit_of(g, super), g);
  EXPECT_LE(a.input, b.input);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_LE(a.layers[l], b.layers[l]);
}

TEST(Analysis, HeadRatioRule) {
  EXPECT_EQ(kc::classify_ratio(15, 1).kind, kc::HeadKind::Mover);
  EXPECT_EQ(kc::classify_ratio(0.05, 1).kind, kc::HeadKind::Relation);
  EXPECT_EQ(kc::classify_ratio(2, 1).kind, kc::HeadKind::Mixture);
  // Exactly at the thresholds: strict inequalities leave both as Mixture.
  EXPECT_EQ(kc::classify_ratio(10, 1).kind, kc::HeadKind::Mixture);
  EXPECT_EQ(kc::classify_ratio(-1, 10).kind, kc::HeadKind::Mixture);
  EXPECT_EQ(kc::classify_ratio(10.000001, 1).kind, kc::HeadKind::Mover);
  EXPECT_EQ(kc::classify_ratio(0.0999999, 1).kind, kc::HeadKind::Relation);
  EXPECT_EQ(kc::classify_ratio(-30, 2).kind, kc::HeadKind::Mover);  // absolute ratio
  for (double scale : {1e-3, 7.0, 1e4}) {
    EXPECT_EQ(kc::classify_ratio(15 * scale, scale).kind, kc::HeadKind::Mover);
    EXPECT_EQ(kc::classify_ratio(0.05 * scale, scale).kind, kc::HeadKind::Relation);
  }
  auto z = kc::classify_ratio(3, 0);
  EXPECT_EQ(z.kind, kc::HeadKind::Mover);
  EXPECT_TRUE(z.degenerate);
  EXPECT_EQ(kc::classify_ratio(0, 0).kind, kc::HeadKind::Mixture);
}

TEST(Analysis, HeadDlaSplitsHeadOutput) {
  // Spans covering positions [0, 2) and [2, T): the two groups partition the
  // attended positions, so their DLAs must sum to the DLA of the whole head
  // output, computed here directly from node_outputs.
  auto m = perturbed();
  auto exs = examples();
  for (auto& ex : exs) {
    ex.subject_begin = 0;
    ex.subject_end = 2;
    ex.relation_begin = 2;
    ex.relation_end = ex.clean.size();
  }
  kc::CompGraph g(m.config());
  const std::size_t d = m.config().d_model;
  for (bool norm : {false, true}) {
    auto heads = kc::classify_heads(m, exs, 10.0, norm);
    ASSERT_EQ(heads.size(), 4u);
    for (const auto& hc : heads) {
      double whole = 0.0;
      for (const auto& ex : exs) {
        const std::size_t T = ex.clean.size();
        auto hooks = *m.run(ex.clean, {.capture = true}).hooks;
        auto out = hooks.node_outputs[g.node_index(hc.head)].data().subspan((T - 1) * d, d);
        auto fin = hooks.residuals.back().data().subspan((T - 1) * d, d);
        whole += m.direct_logit(out, ex.target, fin, norm);
      }
      EXPECT_NEAR(hc.dla_subject + hc.dla_relation, whole, 1e-4);
    }
    auto counts = kc::count_heads(heads, 2);
    EXPECT_EQ(counts.total(kc::HeadKind::Mover) + counts.total(kc::HeadKind::Relation) +
                  counts.total(kc::HeadKind::Mixture),
              4u);
  }
}

TEST(Analysis, LogitLensFinalLayerMatchesModel) {
  auto m = perturbed();
  auto exs = examples();
  std::vector<kc::TaskExample> one{exs[0]};
  auto trace = kc::logit_lens_trace(m, one);
  ASSERT_EQ(trace.size(), 3u);
  auto logits = m.run(one[0].clean).logits;
  const std::size_t V = m.config().vocab_size, T = one[0].clean.size();
  auto last = logits.data().subspan((T - 1) * V, V);
  EXPECT_EQ(trace.back().median_rank, static_cast<double>(kc::rank_of(last, one[0].target)));
  double z = 0.0;
  for (float v : last) z += std::exp(static_cast<double>(v));
  EXPECT_NEAR(trace.back().mean_probability, std::exp(static_cast<double>(last[one[0].target])) / z, 1e-5);
}

TEST(Analysis, LogitLensUntrainedIsNearUniform) {
  kc::Model m(tiny(), 17);
  auto trace = kc::logit_lens_trace(m, examples());
  const double uniform = 1.0 / static_cast<double>(m.config().vocab_size);
  for (const auto& p : trace) {
    EXPECT_GT(p.mean_probability, uniform / 3.0);
    EXPECT_LT(p.mean_probability, uniform * 3.0);
  }
}

TEST(Analysis, AccuraciesOnMemorizedFact) {
  // One fact: prompt 2 4 5 9, attribute 10 11. Trained until memorized.
  kc::ModelConfig c = tiny();
  c.d_model = 16;
  c.d_mlp = 32;
  kc::Model m(c, 4);
  std::vector<std::vector<int>> segs{{4, 5, 9, 10, 11}};
  kc::TrainConfig cfg;
  cfg.epochs = 300;
  cfg.block_size = 12;
  cfg.batch_size = 1;
  cfg.grad_accum = 1;
  cfg.learning_rate = 1e-2;
  cfg.weight_decay = 0.0;
  kc::train(m, segs, cfg, kc::Phase::Base, {});
  auto ex = example({4, 5, 9}, {4, 5, 9}, 10, 10);
  ex.attribute_tokens = {10, 11};
  std::vector<kc::TaskExample> one{ex};
  auto acc = kc::whole_model_accuracies(m, one);
  EXPECT_EQ(acc.first_token, 1.0);
  EXPECT_EQ(acc.query, 1.0);

  kc::Model fresh(c, 8);
  auto many = examples();
  for (auto& e : many) e.attribute_tokens = {e.target, 3, 7};
  auto a = kc::whole_model_accuracies(fresh, many);
  EXPECT_LE(a.query, a.first_token);
}

TEST(Analysis, TransferDiagonalMatchesEvaluation) {
  auto m = perturbed();
  kc::CompGraph g(m.config());
  auto exs = examples();
  std::vector<std::vector<kc::TaskExample>> sets{{exs[0], exs[1]}, {exs[2]}};
  std::vector<kc::Circuit> circuits;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    auto s = kc::eap_ig_scores(m, g, sets[i]);
    circuits.push_back(kc::extract_circuit(g, s, 10));
  }
  auto mat = kc::transfer_matrix(m, circuits, sets);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(mat[i][i], kc::evaluate_circuit(circuits[i], m, sets[i]).hit_at_10);
    for (double v : mat[i]) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Analysis, MetricsCsvColumnsLineUp) {
  kc::MetricsRow r;
  r.stage = "continual";
  r.epoch = 3;
  r.filter = "K_rel";
  r.activation.layers = {0.5, 0.25, 0.125};
  r.heads.per_layer.assign(4, {1, 2, 3});
  std::ostringstream os;
  std::vector<kc::MetricsRow> rows{r};
  kc::write_metrics_csv(os, rows, 4);
  std::istringstream is(os.str());
  std::string comment, header, row;
  std::getline(is, comment);
  std::getline(is, header);
  std::getline(is, row);
  EXPECT_EQ(comment[0], '#');
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(row.substr(0, 18), "continual,3,K_rel,");
}
