// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kc {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_mlp = 512;
  std::size_t vocab_size = 0;
  std::size_t max_context = 128;
  float layernorm_epsilon = 1e-5f;
  bool tie_unembedding = true;

  std::size_t d_head() const { return d_model / n_heads; }

  /// Throws ConfigError on the first violated constraint.
  void validate() const {
    if (n_layers == 0) throw ConfigError("model: n_layers must be positive");
    if (n_heads == 0) throw ConfigError("model: n_heads must be positive");
    if (d_model == 0 || d_model % n_heads != 0) {
      throw ConfigError("model: d_model " + std::to_string(d_model) +
                        " must be a positive multiple of n_heads " + std::to_string(n_heads));
    }
    if (d_mlp == 0) throw ConfigError("model: d_mlp must be positive");
    if (vocab_size == 0) throw ConfigError("model: vocab_size must be positive");
    if (max_context == 0) throw ConfigError("model: max_context must be positive");
    if (!(layernorm_epsilon > 0.0f)) throw ConfigError("model: layernorm_epsilon must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace kc
