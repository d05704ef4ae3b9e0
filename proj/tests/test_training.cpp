// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "kcircuits/corpus.hpp"
#include "kcircuits/training.hpp"

namespace {

kc::ModelConfig small_model(std::size_t vocab) {
  kc::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_mlp = 128;
  c.vocab_size = vocab;
  c.max_context = 64;
  return c;
}

struct TinyCorpus {
  kc::Vocabulary vocab;
  std::vector<std::vector<int>> segments;
};

TinyCorpus tiny_corpus(std::size_t n_segments, std::uint64_t seed,
                       std::span<const kc::Relation> relations = std::vector{kc::Relation::City, kc::Relation::Major}) {
  const auto pools = kc::load_pools(kc::default_data_dir());
  kc::FrequencyParams f;
  f.scale = 0.0;
  auto entities = kc::generate_entities(pools, n_segments, 0, 1, f, seed);
  auto texts = kc::render_corpus(entities, pools, 1, seed, relations);
  TinyCorpus c{kc::Vocabulary::build(texts), {}};
  for (const auto& t : texts) c.segments.push_back(c.vocab.encode(t));
  return c;
}

}  // namespace

TEST(Training, PackExactMultiple) {
  std::vector<int> stream(16);
  std::iota(stream.begin(), stream.end(), 3);
  auto b = kc::pack_blocks(stream, 8);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b.inputs[1][0], 11);
  EXPECT_EQ(b.labels[0][0], 4);
  EXPECT_EQ(b.labels[0][7], kc::kIgnoreLabel);
}

TEST(Training, PackPadsFinalBlock) {
  std::vector<int> stream(9, 5);
  auto b = kc::pack_blocks(stream, 8);
  ASSERT_EQ(b.size(), 2u);
  for (std::size_t t = 1; t < 8; ++t) EXPECT_EQ(b.inputs[1][t], 0);
  for (int l : b.labels[1]) EXPECT_EQ(l, kc::kIgnoreLabel);
}

TEST(Training, LabelCountIsStreamMinusBlocks) {
  for (std::size_t n : {1u, 7u, 8u, 9u, 31u, 100u}) {
    std::vector<int> stream(n, 4);
    auto b = kc::pack_blocks(stream, 8);
    EXPECT_EQ(kc::label_count(b), n - b.size()) << n;
  }
}

TEST(Training, JoinAppendsSeparators) {
  std::vector<std::vector<int>> segs{{5, 6}, {7}};
  EXPECT_EQ(kc::join_segments(segs, 2), (std::vector<int>{5, 6, 2, 7, 2}));
}

TEST(Training, AdamWFirstStepMatchesHandComputation) {
  // After one step with bias correction, m_hat = g and v_hat = g^2, so the
  // update is lr * g / (|g| + eps) on top of the decoupled decay.
  std::vector<kc::Parameter> params;
  params.push_back({"w", kc::ad::Tensor::from_data({2}, {1.0f, -2.0f}, true), true});
  params.push_back({"b", kc::ad::Tensor::from_data({1}, {0.5f}, true), false});
  params[0].value.grad_mut()[0] = 0.3f;
  params[0].value.grad_mut()[1] = -4.0f;
  params[1].value.grad_mut()[0] = 0.2f;
  kc::TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.max_grad_norm = 0.0;
  kc::AdamW opt(params, cfg);
  opt.step(params);
  const double lr = 0.01, wd = 0.1, eps = 1e-6;
  EXPECT_NEAR(params[0].value.data()[0], 1.0 * (1 - lr * wd) - lr * 0.3 / (0.3 + eps), 1e-6);
  EXPECT_NEAR(params[0].value.data()[1], -2.0 * (1 - lr * wd) + lr * 4.0 / (4.0 + eps), 1e-6);
  EXPECT_NEAR(params[1].value.data()[0], 0.5 - lr * 0.2 / (0.2 + eps), 1e-6);
  EXPECT_FALSE(params[0].value.has_grad());
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Training, ZeroEpochsEmitsOnlyInitialCheckpoint) {
  auto corpus = tiny_corpus(4, 1);
  kc::Model m(small_model(corpus.vocab.size()), 1);
  const auto before = m.to_checkpoint();
  std::vector<kc::Checkpoint> got;
  kc::TrainConfig cfg;
  cfg.epochs = 0;
  cfg.block_size = 32;
  kc::train(m, corpus.segments, cfg, kc::Phase::Base, [&](const kc::Checkpoint& c) { got.push_back(c); });
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].epoch, 0u);
  EXPECT_EQ(got[0].parameters, before.parameters);
}

TEST(Training, OverfitsSmallCorpus) {
  auto corpus = tiny_corpus(10, 2, kc::kAllRelations);
  auto mc = small_model(corpus.vocab.size());
  mc.d_model = 64;
  mc.d_mlp = 256;
  kc::Model m(mc, 2);
  kc::TrainConfig cfg;
  cfg.epochs = 50;
  cfg.block_size = 64;
  cfg.batch_size = 1;
  cfg.grad_accum = 1;
  cfg.learning_rate = 2e-3;
  cfg.weight_decay = 0.0;
  cfg.reshuffle_segments = false;
  std::size_t emitted = 0;
  auto report = kc::train(m, corpus.segments, cfg, kc::Phase::Base, [&](const kc::Checkpoint&) { ++emitted; });
  EXPECT_EQ(emitted, 51u);
  ASSERT_EQ(report.epoch_loss.size(), 50u);
  EXPECT_LT(report.epoch_loss.back(), 0.1);
}

TEST(Training, LossDecreasesOnFixedBatch) {
  auto corpus = tiny_corpus(1, 3);
  kc::Model m(small_model(corpus.vocab.size()), 3);
  kc::TrainConfig cfg;
  cfg.epochs = 10;
  cfg.block_size = 64;
  cfg.batch_size = 1;
  cfg.grad_accum = 1;
  auto report = kc::train(m, corpus.segments, cfg, kc::Phase::Base, {});
  ASSERT_EQ(report.losses.size(), 10u);
  EXPECT_LT(report.losses.back().loss, report.losses.front().loss);
}

TEST(Training, ReplayReplacesRequestedShare) {
  std::vector<std::vector<int>> fresh(40, std::vector<int>(15, 7)), old(40, std::vector<int>(15, 9));
  for (double r : {0.0, 0.25, 0.5, 1.0}) {
    kc::Rng rng(4);
    std::size_t replayed = 0;
    auto blocks = kc::epoch_blocks(fresh, old, 16, r, rng, &replayed);
    std::size_t from_old = 0;
    for (const auto& b : blocks.inputs) from_old += b[0] == 9 || b[1] == 9;
    EXPECT_EQ(from_old, replayed);
    EXPECT_LE(std::abs(static_cast<double>(from_old) - r * static_cast<double>(blocks.size())), 1.0);
  }
}

TEST(Training, DeterministicGivenSeed) {
  auto corpus = tiny_corpus(6, 5);
  auto run = [&] {
    kc::Model m(small_model(corpus.vocab.size()), 9);
    kc::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.block_size = 32;
    std::vector<kc::Checkpoint> out;
    kc::train(m, corpus.segments, cfg, kc::Phase::Continual, [&](const kc::Checkpoint& c) { out.push_back(c); });
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, NonFiniteLossAborts) {
  auto corpus = tiny_corpus(4, 6);
  kc::Model m(small_model(corpus.vocab.size()), 1);
  m.parameters()[0].value.data()[5] = std::numeric_limits<float>::quiet_NaN();
  m.parameters()[1].value.data()[0] = std::numeric_limits<float>::quiet_NaN();
  std::size_t emitted = 0;
  kc::TrainConfig cfg;
  cfg.block_size = 32;
  EXPECT_THROW(kc::train(m, corpus.segments, cfg, kc::Phase::Base, [&](const kc::Checkpoint&) { ++emitted; }),
               kc::NumericalError);
  EXPECT_EQ(emitted, 1u);
}

TEST(Training, OptimizerStateRoundTrip) {
  std::vector<kc::Parameter> params;
  params.push_back({"w", kc::ad::Tensor::from_data({2}, {1.0f, 2.0f}, true), true});
  kc::TrainConfig cfg;
  kc::AdamW a(params, cfg);
  params[0].value.grad_mut()[0] = 1.0f;
  a.step(params);
  kc::AdamW b(params, cfg);
  b.load_state(params, a.state(params), a.steps());
  EXPECT_EQ(b.state(params), a.state(params));
  EXPECT_EQ(b.steps(), 1u);
}

TEST(Training, ConfigValidation) {
  kc::TrainConfig c;
  c.replay_ratio = 1.5;
  EXPECT_THROW(c.validate(), kc::ConfigError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), kc::ConfigError);
  c = {};
  EXPECT_NO_THROW(c.validate());
}

TEST(Training, LossCsv) {
  kc::TrainReport r;
  r.losses.push_back({1, 3, 0.5});
  std::ostringstream os;
  kc::write_loss_csv(os, r);
  EXPECT_EQ(os.str(), "epoch,step,loss\n1,3,0.500000\n");
}
