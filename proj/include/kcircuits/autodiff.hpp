// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 tensors with tape-based reverse-mode differentiation.
//
// Operations record onto the thread's active Tape (see TapeScope) whenever
// at least one operand requires a gradient. Without an active tape nothing is
// recorded, which is how inference runs.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kc::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

/// Shared handle to a TensorImpl. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  /// Grad buffer, zero-allocated on first use.
  std::span<float> grad_mut();
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy of the values with no gradient tracking.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(const Tensor& output, BackwardFn fn);
  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse order.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  struct Entry {
    std::shared_ptr<TensorImpl> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

/// Makes `tape` the active tape of the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Linear algebra. `a` may have any rank; its last axis is contracted and the
// leading axes are flattened. `b` is (k, n), or (n, k) with transpose_b.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
// Batched: a (B, m, k) times b (B, k, n), or b (B, n, k) with transpose_b.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
/// Broadcasts `bias` (n) over every row of `a` (..., n).
Tensor add_bias(const Tensor& a, const Tensor& bias);

/// Row softmax over the last axis. With `causal`, the last two axes form a
/// (T, T) score matrix and entries above the diagonal get zero probability.
Tensor softmax(const Tensor& x, bool causal = false);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);
/// tanh approximation used by GPT-2.
Tensor gelu(const Tensor& x);
/// Rows of `table` (V, d) selected by `ids`; result (ids.size(), d).
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);
/// (A, B, C, D) -> (A, C, B, D).
Tensor swap_axes12(const Tensor& x);
/// Treats `x` as (N, last) and picks rows.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
/// Copy that records its own tape entry, so its gradient is kept separately.
Tensor identity(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean token cross-entropy of logits (N, V) against `targets`; entries equal
/// to `ignore_index` are skipped. Returns 0 when nothing is scored.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index = -1);

}  // namespace kc::ad
