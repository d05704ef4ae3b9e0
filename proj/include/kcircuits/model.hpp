// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm GPT-2 style decoder. Every head and MLP writes its own additive
// contribution into the residual stream, and every read point (a head's
// query/key/value input, an MLP input, the unembedding input) applies its own
// layer norm to the raw residual. That makes each edge of CompGraph a linear
// residual-space contribution that can be observed or swapped.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kcircuits/autodiff.hpp"
#include "kcircuits/graph.hpp"
#include "kcircuits/model_config.hpp"

namespace kc {

enum class Phase : std::uint8_t { Base = 0, Continual = 1, Forgetting = 2 };
std::string phase_name(Phase phase);

struct Parameter {
  std::string name;
  ad::Tensor value;
  bool decay = false;  // AdamW weight decay applies (matrices and embeddings)
};

/// Activations of one captured run. All per-position tensors are (T, d_model).
struct HookState {
  std::size_t seq_len = 0;
  std::vector<ad::Tensor> node_outputs;  // by graph node index; Logits entry undefined
  std::vector<ad::Tensor> slot_inputs;   // by graph slot index, before the slot's layer norm
  std::vector<ad::Tensor> residuals;     // layer boundaries 0..n_layers
  std::vector<ad::Tensor> attention;     // per head (layer * H + head): (T, T) pattern
  std::vector<ad::Tensor> values;        // per head: (T, d_head) value vectors
};

/// Edge-level ablation. Each slot input becomes the corrupted run's input plus,
/// for every in-circuit incoming edge, the source's current output minus its
/// corrupted output. Out-of-circuit edges therefore carry corrupted activations.
struct PatchSpec {
  const CompGraph* graph = nullptr;
  std::span<const std::uint8_t> in_circuit;  // one flag per graph edge
  const HookState* corrupted = nullptr;
};

struct RunOptions {
  bool capture = false;
  /// Replaces the token + position embedding, shape (T, d_model). Used for
  /// integrated-gradient interpolation between two inputs.
  const ad::Tensor* embedding = nullptr;
  const PatchSpec* patch = nullptr;
};

struct RunResult {
  ad::Tensor logits;  // (T, vocab)
  std::optional<HookState> hooks;
};

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> optimizer_state;
  std::uint64_t optimizer_step = 0;
  std::uint32_t epoch = 0;
  Phase phase = Phase::Base;
  std::string rng_state;
  std::string metadata;
  bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  explicit Model(const Checkpoint& ckpt);

  const ModelConfig& config() const { return config_; }

  /// Batched forward for training: `tokens` holds batch * seq_len ids, row major.
  /// Returns logits (batch * seq_len, vocab).
  ad::Tensor forward(std::span<const int> tokens, std::size_t batch, std::size_t seq_len) const;

  /// Single-sequence forward with separately materialized read points.
  RunResult run(std::span<const int> tokens, const RunOptions& options = {}) const;

  /// Token plus position embedding, (T, d_model). This is the Input node's output.
  ad::Tensor embed(std::span<const int> tokens) const;

  /// Vocabulary logits for one residual vector.
  std::vector<float> unembed_residual(std::span<const float> residual, bool apply_final_norm) const;

  /// Direct logit attribution of a residual-space contribution onto one token.
  /// With `apply_final_norm`, the final layer norm is linearised using the
  /// scale of `final_residual` (the full residual it is part of).
  double direct_logit(std::span<const float> contribution, int token,
                      std::span<const float> final_residual, bool apply_final_norm) const;

  /// Output of head (layer, head) at `position`, split by attended source
  /// position: returns T rows of d_model values that sum to the head output.
  std::vector<float> head_source_contributions(const HookState& hooks, std::size_t layer,
                                               std::size_t head, std::size_t position) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  void set_requires_grad(bool value);
  void zero_grad();

  Checkpoint to_checkpoint() const;
  void load_parameters(const Checkpoint& ckpt);

 private:
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  const ad::Tensor& p(std::size_t i) const { return params_[i].value; }
  std::size_t add_param(std::string name, ad::Shape shape, bool decay);
  void build_parameters();
  void initialize(std::uint64_t seed);
  void check_tokens(std::span<const int> tokens, std::size_t seq_len) const;
  ad::Tensor unembed_matmul(const ad::Tensor& normed) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::size_t wte_ = 0, wpe_ = 0, lnf_g_ = 0, lnf_b_ = 0, wu_ = 0, bu_ = 0;
  std::vector<Layer> layers_;
};

}  // namespace kc
