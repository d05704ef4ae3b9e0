// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "kcircuits/model.hpp"
#include "kcircuits/rng.hpp"

namespace kc {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-6;
  double weight_decay = 0.1;
  double max_grad_norm = 1.0;  // 0 disables clipping
  std::size_t grad_accum = 4;
  std::size_t batch_size = 2;
  std::size_t block_size = 128;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  double replay_ratio = 0.0;
  /// Re-pack the corpus in a new segment order every epoch. When false the
  /// corpus order is packed once and only the block order changes.
  bool reshuffle_segments = true;

  /// Throws ConfigError.
  void validate() const;
};

/// Fixed-length training blocks. Inputs are padded with <pad>; labels are the
/// next token within the same block, or -1 where there is none.
struct Blocks {
  std::size_t block_size = 0;
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> labels;
  std::size_t size() const { return inputs.size(); }
};

inline constexpr int kIgnoreLabel = -1;

/// Segments joined into one stream, each followed by the separator id.
std::vector<int> join_segments(std::span<const std::vector<int>> segments, int separator);
Blocks pack_blocks(std::span<const int> stream, std::size_t block_size, int pad_id = 0);
std::size_t label_count(const Blocks& blocks);

/// One epoch's blocks: `segments` (in shuffled order when `reshuffle`), packed, then
/// round(replay_ratio * n) of the n blocks replaced by blocks drawn from
/// `prior`. The number replaced is stored in `replayed`.
Blocks epoch_blocks(std::span<const std::vector<int>> segments, std::span<const std::vector<int>> prior,
                    std::size_t block_size, double replay_ratio, Rng& rng, std::size_t* replayed = nullptr,
                    bool reshuffle = true);

/// AdamW with decoupled weight decay, applied only to parameters flagged `decay`.
class AdamW {
 public:
  AdamW(const std::vector<Parameter>& params, const TrainConfig& config);
  /// Applies one update from the accumulated gradients, then clears them.
  void step(std::vector<Parameter>& params);
  std::uint64_t steps() const { return steps_; }

  std::vector<NamedTensor> state(const std::vector<Parameter>& params) const;
  void load_state(const std::vector<Parameter>& params, const std::vector<NamedTensor>& state, std::uint64_t steps);

 private:
  TrainConfig config_;
  std::vector<std::vector<float>> m_, v_;
  std::uint64_t steps_ = 0;
};

struct LossRecord {
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  double loss = 0.0;
};

struct TrainReport {
  std::vector<LossRecord> losses;  // one row per optimizer step
  std::vector<double> epoch_loss;  // token-weighted mean per epoch
};

/// Receives the stage's initial checkpoint (epoch 0) and one per epoch.
using CheckpointSink = std::function<void(const Checkpoint&)>;

/// Next-token training. With replay_ratio r, round(r * n) of each epoch's n
/// blocks are replaced by blocks drawn from `prior`. Throws NumericalError on a
/// non-finite loss; checkpoints already delivered to `sink` stay valid.
TrainReport train(Model& model, std::span<const std::vector<int>> segments, const TrainConfig& config, Phase phase,
                  const CheckpointSink& sink, std::span<const std::vector<int>> prior = {});

/// Writes "epoch,step,loss" rows.
void write_loss_csv(std::ostream& os, const TrainReport& report);

}  // namespace kc
