// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "kcircuits/attribution.hpp"
#include "kcircuits/metrics.hpp"
#include "kcircuits/training.hpp"

namespace {

kc::ModelConfig toy_config(std::size_t vocab) {
  kc::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_mlp = 128;
  c.vocab_size = vocab;
  c.max_context = 64;
  return c;
}

// A 2-layer, 2-head model trained briefly on a small fact corpus, with task
// examples drawn from the same entities.
struct Toy {
  kc::Pools pools;
  kc::Vocabulary vocab;
  std::vector<kc::EntityProfile> entities;
  std::unique_ptr<kc::Model> model;
  std::vector<kc::TaskExample> examples;
};

const Toy& trained_toy() {
  static const Toy toy = [] {
    Toy t;
    t.pools = kc::load_pools(kc::default_data_dir());
    kc::FrequencyParams f;
    f.scale = 0.0;
    const std::vector<kc::Relation> rels{kc::Relation::City, kc::Relation::Major};
    t.entities = kc::generate_entities(t.pools, 24, 0, 1, f, 11);
    auto texts = kc::render_corpus(t.entities, t.pools, 1, 11, rels);
    std::vector<std::string> all = texts;
    for (const auto& e : t.entities) {
      for (auto r : rels) all.push_back(e.name() + " " + kc::relation_name(r));
    }
    t.vocab = kc::Vocabulary::build(all);
    std::vector<std::vector<int>> segs;
    for (const auto& s : texts) segs.push_back(t.vocab.encode(s));
    t.model = std::make_unique<kc::Model>(toy_config(t.vocab.size()), 5);
    kc::TrainConfig cfg;
    cfg.epochs = 12;
    cfg.block_size = 64;
    cfg.batch_size = 1;
    cfg.grad_accum = 1;
    cfg.learning_rate = 2e-3;
    kc::train(*t.model, segs, cfg, kc::Phase::Base, {});
    auto split = kc::make_task_examples(t.entities, t.pools, t.vocab, rels, {}, 12, 3);
    t.examples = split.validation;
    t.examples.insert(t.examples.end(), split.test.begin(), split.test.end());
    t.examples.resize(std::min<std::size_t>(t.examples.size(), 8));
    return t;
  }();
  return toy;
}

}  // namespace

TEST(Attribution, LossArithmetic) {
  kc::TaskExample ex;
  ex.target = 1;
  ex.corrupted_target = 2;
  std::vector<float> logits{0.0f, 2.0f, 0.5f};
  EXPECT_DOUBLE_EQ(kc::attribution_loss_value(logits, ex), -1.5);
  ex.corrupted_target = 1;
  EXPECT_DOUBLE_EQ(kc::attribution_loss_value(logits, ex), 0.0);
  ex.target = 7;
  EXPECT_THROW(kc::attribution_loss_value(logits, ex), std::out_of_range);
}

TEST(Attribution, LossTensorMatchesValueAndIsMonotone) {
  kc::TaskExample ex;
  ex.clean = {1, 2};
  ex.corrupted = {1, 3};
  ex.target = 0;
  ex.corrupted_target = 2;
  auto logits = kc::ad::Tensor::from_data({2, 3}, {9, 9, 9, 1.0f, 4.0f, 0.25f});
  EXPECT_FLOAT_EQ(kc::attribution_loss(logits, ex).item(), -0.75f);
  auto raised = kc::ad::Tensor::from_data({2, 3}, {9, 9, 9, 1.5f, 4.0f, 0.25f});
  EXPECT_LT(kc::attribution_loss(raised, ex).item(), kc::attribution_loss(logits, ex).item());
}

TEST(Attribution, IdenticalPairGivesExactZeros) {
  const auto& toy = trained_toy();
  kc::CompGraph g(toy.model->config());
  auto ex = toy.examples[0];
  ex.corrupted = ex.clean;
  std::vector<kc::TaskExample> one{ex};
  auto s = kc::eap_ig_scores(*toy.model, g, one);
  ASSERT_EQ(s.scores.size(), g.edge_count());
  for (double v : s.scores) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(s.steps, 5u);
}

TEST(Attribution, SwappedPairIsFinite) {
  const auto& toy = trained_toy();
  kc::CompGraph g(toy.model->config());
  auto ex = toy.examples[0];
  std::swap(ex.clean, ex.corrupted);
  std::swap(ex.target, ex.corrupted_target);
  std::vector<kc::TaskExample> one{ex};
  for (double v : kc::eap_ig_scores(*toy.model, g, one).scores) EXPECT_TRUE(std::isfinite(v));
}

TEST(Attribution, FullAndEmptyCircuitIdentities) {
  const auto& toy = trained_toy();
  const auto& m = *toy.model;
  kc::CompGraph g(m.config());
  for (const auto& ex : toy.examples) {
    auto corr = *m.run(ex.corrupted, {.capture = true}).hooks;
    std::vector<std::uint8_t> full(g.edge_count(), 1), none(g.edge_count(), 0);
    kc::PatchSpec pf{&g, full, &corr}, pe{&g, none, &corr};
    auto clean = m.run(ex.clean).logits, corrupted = m.run(ex.corrupted).logits;
    auto a = m.run(ex.clean, {.patch = &pf}).logits, b = m.run(ex.clean, {.patch = &pe}).logits;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      EXPECT_NEAR(a.data()[i], clean.data()[i], 1e-4);
      EXPECT_NEAR(b.data()[i], corrupted.data()[i], 1e-4);
    }
  }
  kc::CircuitEvaluator eval(m, g, toy.examples);
  kc::EdgeScores zero;
  zero.scores.assign(g.edge_count(), 0.0);
  EXPECT_EQ(eval.evaluate(kc::extract_circuit(g, zero, g.edge_count())).ranks, eval.whole_model().ranks);
  EXPECT_EQ(eval.evaluate(kc::extract_circuit(g, zero, 0)).ranks, eval.corrupted_baseline().ranks);
}

TEST(Attribution, PatchingOracleIdentities) {
  const auto& toy = trained_toy();
  const auto& m = *toy.model;
  kc::CompGraph g(m.config());
  // Every edge out of the Input node carries the embedding; positions whose
  // tokens agree contribute nothing, so a pair differing nowhere gives 0.
  auto ex = toy.examples[0];
  ex.corrupted = ex.clean;
  std::vector<kc::TaskExample> same{ex};
  for (double v : kc::patching_oracle(m, g, same)) EXPECT_NEAR(v, 0.0, 1e-5);

  // Corrupting every edge at once reproduces the corrupted run's loss.
  std::vector<kc::TaskExample> one{toy.examples[0]};
  auto corr = *m.run(one[0].corrupted, {.capture = true}).hooks;
  std::vector<std::uint8_t> none(g.edge_count(), 0);
  kc::PatchSpec pe{&g, none, &corr};
  auto patched = m.run(one[0].clean, {.patch = &pe}).logits;
  auto corrupted = m.run(one[0].corrupted).logits;
  const std::size_t V = m.config().vocab_size, T = one[0].clean.size();
  EXPECT_NEAR(kc::attribution_loss_value(patched.data().subspan((T - 1) * V, V), one[0]),
              kc::attribution_loss_value(corrupted.data().subspan((T - 1) * V, V), one[0]), 1e-4);

  EXPECT_THROW(kc::patching_oracle(m, g, one, 10), kc::PatchingRefused);
}

TEST(Attribution, AgreesWithExactPatching) {
  const auto& toy = trained_toy();
  ASSERT_GE(toy.examples.size(), 8u);
  kc::CompGraph g(toy.model->config());
  auto scores = kc::eap_ig_scores(*toy.model, g, toy.examples);
  auto effects = kc::patching_oracle(*toy.model, g, toy.examples);
  std::vector<double> a, b;
  for (std::size_t e = 0; e < g.edge_count(); ++e) {
    a.push_back(std::abs(scores.scores[e]));
    b.push_back(std::abs(effects[e]));
  }
  const double rho = kc::spearman(a, b);
  RecordProperty("spearman", std::to_string(rho));
  EXPECT_GE(rho, 0.8);
}

TEST(Attribution, WorkerCountInvariance) {
  const auto& toy = trained_toy();
  kc::CompGraph g(toy.model->config());
  auto one = kc::eap_ig_scores(*toy.model, g, toy.examples, {.steps = 3, .jobs = 1});
  auto four = kc::eap_ig_scores(*toy.model, g, toy.examples, {.steps = 3, .jobs = 4});
  for (std::size_t e = 0; e < g.edge_count(); ++e) EXPECT_NEAR(one.scores[e], four.scores[e], 1e-5);
}

TEST(Attribution, ExtractIsNestedAndTieBroken) {
  kc::ModelConfig c = toy_config(10);
  kc::CompGraph g(c);
  kc::EdgeScores s;
  for (std::size_t e = 0; e < g.edge_count(); ++e) s.scores.push_back(static_cast<double>((e * 7) % 5) - 2.0);
  std::vector<std::size_t> prev;
  for (std::size_t n = 0; n <= g.edge_count(); ++n) {
    auto circ = kc::extract_circuit(g, s, n);
    ASSERT_EQ(circ.size(), n);
    EXPECT_TRUE(std::includes(circ.edges.begin(), circ.edges.end(), prev.begin(), prev.end()));
    prev = circ.edges;
  }
  // |score| = 2 appears at e ≡ 0 or 4 (mod 5) in e*7 % 5; the first three in
  // canonical order win.
  auto top3 = kc::extract_circuit(g, s, 3);
  std::vector<std::size_t> expect;
  for (std::size_t e = 0; expect.size() < 3; ++e) {
    if (std::abs(s.scores[e]) == 2.0) expect.push_back(e);
  }
  EXPECT_EQ(top3.edges, expect);
  for (auto e : top3.edges) {
    EXPECT_TRUE(std::binary_search(top3.nodes.begin(), top3.nodes.end(), g.edge_source(e)));
    EXPECT_TRUE(std::binary_search(top3.nodes.begin(), top3.nodes.end(), g.slot_node(g.edge_slot(e))));
  }
  EXPECT_THROW(kc::extract_circuit(g, s, g.edge_count() + 1), std::invalid_argument);
  EXPECT_TRUE(kc::extract_circuit(g, s, 0).nodes.empty());
}

TEST(Attribution, CalibrationFullTargetAndDegenerate) {
  const auto& toy = trained_toy();
  kc::CompGraph g(toy.model->config());
  auto scores = kc::eap_ig_scores(*toy.model, g, toy.examples);
  auto cal = kc::calibrate_edge_budget(*toy.model, g, scores, toy.examples, 1.0);
  EXPECT_FALSE(cal.degenerate);
  EXPECT_LE(cal.n, g.edge_count());
  EXPECT_GE(cal.circuit_hit_at_10, cal.model_hit_at_10);
  EXPECT_EQ(cal.sweep_n.front(), 16u);
  for (std::size_t i = 1; i < cal.sweep_n.size(); ++i) {
    EXPECT_EQ(cal.sweep_n[i], std::min(2 * cal.sweep_n[i - 1], g.edge_count()));
  }
  EXPECT_THROW(kc::calibrate_edge_budget(*toy.model, g, scores, toy.examples, 0.0), std::invalid_argument);

  // Targets nobody can rank in the top 10: the vacuous threshold.
  kc::Model fresh(toy.model->config(), 99);
  auto hopeless = toy.examples;
  for (auto& ex : hopeless) {
    auto logits = fresh.run(ex.clean).logits;
    const std::size_t V = fresh.config().vocab_size, T = ex.clean.size();
    auto last = logits.data().subspan((T - 1) * V, V);
    ex.target = static_cast<int>(std::min_element(last.begin(), last.end()) - last.begin());
  }
  auto deg = kc::calibrate_edge_budget(fresh, g, scores, hopeless, 0.7);
  EXPECT_TRUE(deg.degenerate);
  EXPECT_EQ(deg.n, 16u);
  EXPECT_EQ(deg.model_hit_at_10, 0.0);
}

TEST(Attribution, EvaluatorRejectsMismatchedCircuit) {
  const auto& toy = trained_toy();
  kc::CompGraph g(toy.model->config());
  kc::CircuitEvaluator eval(*toy.model, g, toy.examples);
  kc::ModelConfig other = toy.model->config();
  other.n_layers = 3;
  kc::CompGraph g3(other);
  kc::EdgeScores s;
  s.scores.assign(g3.edge_count(), 1.0);
  EXPECT_THROW(eval.evaluate(kc::extract_circuit(g3, s, 4)), std::invalid_argument);
}

TEST(Attribution, FilesRoundTrip) {
  kc::ModelConfig c = toy_config(10);
  kc::CompGraph g(c);
  kc::EdgeScores s;
  for (std::size_t e = 0; e < g.edge_count(); ++e) s.scores.push_back(std::sin(static_cast<double>(e)) / 3.0);
  s.steps = 5;
  s.examples = 8;
  s.checkpoint = "base-e3";
  std::stringstream ss;
  kc::write_edge_scores(ss, g, s);
  auto back = kc::read_edge_scores(ss, g);
  EXPECT_EQ(back.scores, s.scores);
  EXPECT_EQ(back.steps, 5u);
  EXPECT_EQ(back.checkpoint, "base-e3");

  auto circ = kc::extract_circuit(g, s, 7);
  circ.filter = "K_rel";
  std::stringstream cs;
  kc::write_circuit(cs, g, circ);
  auto cb = kc::read_circuit(cs, g);
  EXPECT_EQ(cb.edges, circ.edges);
  EXPECT_EQ(cb.nodes, circ.nodes);
  EXPECT_EQ(cb.scores, circ.scores);
  EXPECT_EQ(cb.filter, "K_rel");

  std::stringstream bad("source\tdestination\tchannel\tscore\ninput\ta0.h0\tz\t1\n");
  EXPECT_THROW(kc::read_circuit(bad, g), std::runtime_error);
  std::stringstream missing("source\tdestination\tchannel\tscore\n");
  EXPECT_THROW(kc::read_edge_scores(missing, g), std::runtime_error);
}
