// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace kc {

/// 1 + number of logits strictly greater than logits[token].
std::size_t rank_of(std::span<const float> logits, int token);

/// Fraction of ranks <= 10. Throws std::invalid_argument on an empty set.
double hit_at_10(std::span<const std::size_t> ranks);

/// |a ∩ b| / |a ∪ b| over sorted, duplicate-free index lists; 1 when both are empty.
double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b);

/// Natural-log Shannon entropy of |s| / Σ|s|. Throws std::invalid_argument
/// when the list is empty or every score is zero.
double circuit_entropy(std::span<const double> scores);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

/// Ranks 1..n, ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> x);

}  // namespace kc
