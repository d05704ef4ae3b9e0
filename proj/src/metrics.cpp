// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace kc {

std::size_t rank_of(std::span<const float> logits, int token) {
  if (token < 0 || static_cast<std::size_t>(token) >= logits.size()) {
    throw std::out_of_range("rank_of: token " + std::to_string(token) + " outside " +
                            std::to_string(logits.size()) + " logits");
  }
  const float t = logits[static_cast<std::size_t>(token)];
  return 1 + static_cast<std::size_t>(std::count_if(logits.begin(), logits.end(), [t](float v) { return v > t; }));
}

double hit_at_10(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw std::invalid_argument("hit_at_10: empty test set");
  std::size_t hits = 0;
  for (auto r : ranks) {
    if (r == 0) throw std::invalid_argument("hit_at_10: ranks start at 1");
    hits += r <= 10;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++inter;
      ++i;
      ++j;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

double circuit_entropy(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("circuit_entropy: empty circuit");
  double total = 0.0;
  for (double s : scores) total += std::abs(s);
  if (!(total > 0.0)) throw std::invalid_argument("circuit_entropy: all scores are zero");
  double h = 0.0;
  for (double s : scores) {
    const double p = std::abs(s) / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace kc
