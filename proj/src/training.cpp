// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "kcircuits/corpus.hpp"
#include "kcircuits/rng.hpp"

namespace kc {

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string("train: ") + name + " must be positive");
  };
  positive(learning_rate, "learning_rate");
  positive(epsilon, "epsilon");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("train: max_grad_norm must be non-negative");
  if (grad_accum == 0 || batch_size == 0 || block_size < 2) {
    throw ConfigError("train: grad_accum and batch_size must be positive, block_size at least 2");
  }
  if (!(replay_ratio >= 0.0 && replay_ratio <= 1.0)) throw ConfigError("train: replay_ratio must lie in [0, 1]");
}

std::vector<int> join_segments(std::span<const std::vector<int>> segments, int separator) {
  std::vector<int> out;
  for (const auto& s : segments) {
    out.insert(out.end(), s.begin(), s.end());
    out.push_back(separator);
  }
  return out;
}

Blocks pack_blocks(std::span<const int> stream, std::size_t block_size, int pad_id) {
  if (block_size == 0) throw std::invalid_argument("pack_blocks: block_size must be positive");
  Blocks b;
  b.block_size = block_size;
  for (std::size_t start = 0; start < stream.size(); start += block_size) {
    const std::size_t len = std::min(block_size, stream.size() - start);
    std::vector<int> in(block_size, pad_id), lab(block_size, kIgnoreLabel);
    for (std::size_t t = 0; t < len; ++t) {
      in[t] = stream[start + t];
      if (t + 1 < len) lab[t] = stream[start + t + 1];
    }
    b.inputs.push_back(std::move(in));
    b.labels.push_back(std::move(lab));
  }
  return b;
}

std::size_t label_count(const Blocks& blocks) {
  std::size_t n = 0;
  for (const auto& l : blocks.labels) n += static_cast<std::size_t>(std::count_if(l.begin(), l.end(), [](int x) {
    return x != kIgnoreLabel;
  }));
  return n;
}

AdamW::AdamW(const std::vector<Parameter>& params, const TrainConfig& config) : config_(config) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.size(), 0.0f);
    v_.emplace_back(p.value.size(), 0.0f);
  }
}

void AdamW::step(std::vector<Parameter>& params) {
  if (params.size() != m_.size()) throw std::logic_error("AdamW: parameter list changed");
  // Global norm clipping over all gradients.
  double scale = 1.0;
  if (config_.max_grad_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params) {
      for (float g : p.value.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.max_grad_norm) scale = config_.max_grad_norm / norm;
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const auto b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.value.has_grad()) continue;
    auto w = p.value.data();
    auto g = p.value.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const float decay = p.decay ? static_cast<float>(1.0 - lr * config_.weight_decay) : 1.0f;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const float gk = static_cast<float>(g[k] * scale);
      m[k] = b1 * m[k] + (1.0f - b1) * gk;
      v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
      const double upd = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config_.epsilon);
      w[k] = static_cast<float>(w[k] * decay - lr * upd);
    }
    p.value.zero_grad();
  }
}

std::vector<NamedTensor> AdamW::state(const std::vector<Parameter>& params) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({"adam.m." + params[i].name, params[i].value.shape(), m_[i]});
    out.push_back({"adam.v." + params[i].name, params[i].value.shape(), v_[i]});
  }
  return out;
}

void AdamW::load_state(const std::vector<Parameter>& params, const std::vector<NamedTensor>& state,
                       std::uint64_t steps) {
  if (state.size() != 2 * params.size()) throw std::runtime_error("AdamW: optimizer state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = state[2 * i];
    const auto& v = state[2 * i + 1];
    if (m.values.size() != params[i].value.size() || v.values.size() != params[i].value.size()) {
      throw std::runtime_error("AdamW: optimizer state for " + params[i].name + " has the wrong size");
    }
    m_[i] = m.values;
    v_[i] = v.values;
  }
  steps_ = steps;
}

namespace {

Blocks shuffled_blocks(std::span<const std::vector<int>> segments, std::size_t block_size, Rng& rng, bool reshuffle) {
  std::vector<std::size_t> order(segments.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (reshuffle) rng.shuffle(order);
  std::vector<std::vector<int>> shuffled;
  shuffled.reserve(order.size());
  for (auto i : order) shuffled.push_back(segments[i]);
  return pack_blocks(join_segments(shuffled, Vocabulary::kSep), block_size, Vocabulary::kPad);
}

}  // namespace

Blocks epoch_blocks(std::span<const std::vector<int>> segments, std::span<const std::vector<int>> prior,
                    std::size_t block_size, double replay_ratio, Rng& rng, std::size_t* replayed,
                    bool reshuffle) {
  Blocks blocks = shuffled_blocks(segments, block_size, rng, reshuffle);
  std::size_t n_replay = 0;
  if (replay_ratio > 0.0 && !prior.empty()) {
    Blocks old = shuffled_blocks(prior, block_size, rng, reshuffle);
    n_replay = std::min(blocks.size(),
                        static_cast<std::size_t>(std::llround(replay_ratio * static_cast<double>(blocks.size()))));
    std::vector<std::size_t> slots(blocks.size());
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    rng.shuffle(slots);
    for (std::size_t i = 0; i < n_replay; ++i) {
      const std::size_t src = rng.below(old.size());
      blocks.inputs[slots[i]] = old.inputs[src];
      blocks.labels[slots[i]] = old.labels[src];
    }
  }
  if (replayed) *replayed = n_replay;
  return blocks;
}

TrainReport train(Model& model, std::span<const std::vector<int>> segments, const TrainConfig& config, Phase phase,
                  const CheckpointSink& sink, std::span<const std::vector<int>> prior) {
  config.validate();
  if (config.block_size > model.config().max_context) {
    throw ConfigError("train: block_size " + std::to_string(config.block_size) + " exceeds max_context " +
                      std::to_string(model.config().max_context));
  }
  if (config.replay_ratio > 0.0 && prior.empty()) {
    throw ConfigError("train: replay_ratio > 0 needs a prior corpus");
  }
  Rng rng(config.seed);
  AdamW opt(model.parameters(), config);
  TrainReport report;

  auto emit = [&](std::uint32_t epoch) {
    if (!sink) return;
    Checkpoint ck = model.to_checkpoint();
    ck.optimizer_state = opt.state(model.parameters());
    ck.optimizer_step = opt.steps();
    ck.epoch = epoch;
    ck.phase = phase;
    ck.rng_state = rng.state();
    sink(ck);
  };
  emit(0);

  model.set_requires_grad(true);
  const std::size_t T = config.block_size;
  for (std::uint32_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Blocks blocks = epoch_blocks(segments, prior, T, config.replay_ratio, rng, nullptr, config.reshuffle_segments);
    const auto& inputs = blocks.inputs;
    const auto& labels = blocks.labels;
    std::vector<std::size_t> order(inputs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);

    double epoch_sum = 0.0;
    std::size_t epoch_tokens = 0;
    double group_sum = 0.0;
    std::size_t group_tokens = 0;
    const std::size_t n_batches = (order.size() + config.batch_size - 1) / config.batch_size;

    // Gradients of each micro-batch are scaled by its share of the group's
    // tokens, so an optimizer step sees the mean over all tokens it covers.
    std::vector<std::size_t> batch_tokens(n_batches, 0);
    for (std::size_t b = 0; b < n_batches; ++b) {
      for (std::size_t i = b * config.batch_size; i < std::min(order.size(), (b + 1) * config.batch_size); ++i) {
        for (int l : labels[order[i]]) batch_tokens[b] += l != kIgnoreLabel;
      }
    }
    for (std::size_t b = 0; b < n_batches; ++b) {
      const std::size_t group_start = b - b % config.grad_accum;
      const std::size_t group_end = std::min(n_batches, group_start + config.grad_accum);
      std::size_t tokens_in_group = 0;
      for (std::size_t g = group_start; g < group_end; ++g) tokens_in_group += batch_tokens[g];

      const std::size_t lo = b * config.batch_size, hi = std::min(order.size(), lo + config.batch_size);
      std::vector<int> tok, lab;
      for (std::size_t i = lo; i < hi; ++i) {
        tok.insert(tok.end(), inputs[order[i]].begin(), inputs[order[i]].end());
        lab.insert(lab.end(), labels[order[i]].begin(), labels[order[i]].end());
      }
      if (batch_tokens[b] > 0) {
        ad::Tape tape;
        ad::TapeScope scope(tape);
        ad::Tensor logits = model.forward(tok, hi - lo, T);
        ad::Tensor loss = ad::cross_entropy(logits, lab);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          model.set_requires_grad(false);
          throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(opt.steps() + 1));
        }
        const float weight = static_cast<float>(batch_tokens[b]) / static_cast<float>(tokens_in_group);
        tape.backward(ad::scale(loss, weight));
        group_sum += value * static_cast<double>(batch_tokens[b]);
        epoch_sum += value * static_cast<double>(batch_tokens[b]);
        group_tokens += batch_tokens[b];
        epoch_tokens += batch_tokens[b];
      }
      if (b + 1 == group_end) {
        if (group_tokens > 0) {
          opt.step(model.parameters());
          report.losses.push_back({epoch, opt.steps(), group_sum / static_cast<double>(group_tokens)});
        }
        group_sum = 0.0;
        group_tokens = 0;
      }
    }
    report.epoch_loss.push_back(epoch_tokens ? epoch_sum / static_cast<double>(epoch_tokens) : 0.0);
    model.set_requires_grad(false);
    emit(epoch);
    model.set_requires_grad(true);
  }
  model.set_requires_grad(false);
  model.zero_grad();
  return report;
}

void write_loss_csv(std::ostream& os, const TrainReport& report) {
  os << "epoch,step,loss\n";
  char buf[64];
  for (const auto& r : report.losses) {
    std::snprintf(buf, sizeof buf, "%.6f", r.loss);
    os << r.epoch << ',' << r.step << ',' << buf << '\n';
  }
}

}  // namespace kc
