// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace kc::ad {
namespace {

thread_local Tape* g_active_tape = nullptr;

using ImplPtr = std::shared_ptr<TensorImpl>;

Tensor make(Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(numel(shape), 0.0f);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

float* grad_buf(TensorImpl& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0f);
  return impl.grad.data();
}

void record(Tensor& out, Tape::BackwardFn fn) {
  out.set_requires_grad(true);
  g_active_tape->record(out, std::move(fn));
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) shape_fail(op, "expected rank >= 1, got a scalar");
  return t.shape().back();
}

// Row-major C(m,n) = alpha * op(A) op(B) + beta * C.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const float* a,
          const float* b, float beta, float* c) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0f) std::fill(c, c + m * n, 0.0f);
    return;
  }
  const int lda = static_cast<int>(ta ? m : k);
  const int ldb = static_cast<int>(tb ? k : n);
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0f, a, lda, b, ldb,
              beta, c, static_cast<int>(n));
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "operand shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t = make(std::move(shape));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " holds " +
                     std::to_string(numel(shape)) + " values, got " + std::to_string(data.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

float Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

std::span<float> Tensor::grad_mut() {
  grad_buf(*impl_);
  return impl_->grad;
}

Tensor Tensor::detach() const {
  return from_data(shape(), impl_->data, false);
}

void Tape::record(const Tensor& output, BackwardFn fn) {
  entries_.push_back({output.ptr(), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1 || loss.rank() != 0) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (entries_.empty()) throw ContractError("backward: tape is empty");
  grad_buf(*loss.impl())[0] += 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    it->fn();
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const std::size_t k = last_dim(a, "matmul");
  if (b.rank() != 2) shape_fail("matmul", "right operand must be 2-D, got " + shape_str(b.shape()));
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (bk != k) {
    shape_fail("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const std::size_t m = a.size() / std::max<std::size_t>(k, 1);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out = make(out_shape);
  gemm(false, transpose_b, m, n, k, a.data().data(), b.data().data(), 0.0f, out.data().data());
  if (tracking({&a, &b})) {
    ImplPtr pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    record(out, [pa, pb, po, m, n, k, transpose_b] {
      const float* dc = po->grad.data();
      if (pa->requires_grad) {
        // dA = dC op(B)^T
        gemm(false, !transpose_b, m, k, n, dc, pb->data.data(), 1.0f, grad_buf(*pa));
      }
      if (pb->requires_grad) {
        if (transpose_b) {
          gemm(true, false, n, k, m, dc, pa->data.data(), 1.0f, grad_buf(*pb));  // dB = dC^T A
        } else {
          gemm(true, false, k, n, m, pa->data.data(), dc, 1.0f, grad_buf(*pb));  // dB = A^T dC
        }
      }
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3) {
    shape_fail("bmm", "operands must be 3-D, got " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || bk != k) {
    shape_fail("bmm", "incompatible shapes " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  Tensor out = make({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(false, transpose_b, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
         0.0f, out.data().data() + i * m * n);
  }
  if (tracking({&a, &b})) {
    ImplPtr pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    record(out, [pa, pb, po, batch, m, n, k, transpose_b] {
      for (std::size_t i = 0; i < batch; ++i) {
        const float* dc = po->grad.data() + i * m * n;
        const float* ai = pa->data.data() + i * m * k;
        const float* bi = pb->data.data() + i * k * n;
        if (pa->requires_grad) gemm(false, !transpose_b, m, k, n, dc, bi, 1.0f, grad_buf(*pa) + i * m * k);
        if (pb->requires_grad) {
          float* db = grad_buf(*pb) + i * k * n;
          if (transpose_b) {
            gemm(true, false, n, k, m, dc, ai, 1.0f, db);
          } else {
            gemm(true, false, k, n, m, ai, dc, 1.0f, db);
          }
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  Tensor out = make(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (tracking({&a, &b})) {
    ImplPtr pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    record(out, [pa, pb, po] {
      const auto& g = po->grad;
      for (const auto& p : {pa, pb}) {
        if (!p->requires_grad) continue;
        float* d = grad_buf(*p);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same(a, b, "sub");
  Tensor out = make(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  if (tracking({&a, &b})) {
    ImplPtr pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    record(out, [pa, pb, po] {
      const auto& g = po->grad;
      if (pa->requires_grad) {
        float* d = grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (pb->requires_grad) {
        float* d = grad_buf(*pb);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same(a, b, "mul");
  Tensor out = make(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (tracking({&a, &b})) {
    ImplPtr pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    record(out, [pa, pb, po] {
      const auto& g = po->grad;
      if (pa->requires_grad) {
        float* d = grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * pb->data[i];
      }
      if (pb->requires_grad) {
        float* d = grad_buf(*pb);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * pa->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float factor) {
  Tensor out = make(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (tracking({&a})) {
    ImplPtr pa = a.ptr(), po = out.ptr();
    record(out, [pa, po, factor] {
      const auto& g = po->grad;
      float* d = grad_buf(*pa);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t n = last_dim(a, "add_bias");
  if (bias.rank() != 1 || bias.dim(0) != n) {
    shape_fail("add_bias", "bias " + shape_str(bias.shape()) + " does not match last axis of " +
                               shape_str(a.shape()));
  }
  Tensor out = make(a.shape());
  auto o = out.data();
  auto x = a.data(), bb = bias.data();
  const std::size_t rows = n ? a.size() / n : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] = x[r * n + j] + bb[j];
  }
  if (tracking({&a, &bias})) {
    ImplPtr pa = a.ptr(), pb = bias.ptr(), po = out.ptr();
    record(out, [pa, pb, po, rows, n] {
      const auto& g = po->grad;
      if (pa->requires_grad) {
        float* d = grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (pb->requires_grad) {
        float* d = grad_buf(*pb);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) d[j] += g[r * n + j];
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, bool causal) {
  const std::size_t n = last_dim(x, "softmax");
  std::size_t t = 0;
  if (causal) {
    if (x.rank() < 2 || x.shape()[x.rank() - 2] != n) {
      shape_fail("softmax", "causal mask needs square trailing axes, got " + shape_str(x.shape()));
    }
    t = n;
  }
  Tensor out = make(x.shape());
  const std::size_t rows = n ? x.size() / n : 0;
  auto in = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t width = causal ? (r % t) + 1 : n;
    const float* xr = in.data() + r * n;
    float* orow = o.data() + r * n;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < width; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      z += orow[j];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (std::size_t j = 0; j < width; ++j) orow[j] *= inv;
    for (std::size_t j = width; j < n; ++j) orow[j] = 0.0f;
  }
  if (tracking({&x})) {
    ImplPtr px = x.ptr(), po = out.ptr();
    record(out, [px, po, rows, n] {
      float* d = grad_buf(*px);
      for (std::size_t r = 0; r < rows; ++r) {
        const float* y = po->data.data() + r * n;
        const float* g = po->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(y[j]) * g[j];
        for (std::size_t j = 0; j < n; ++j) {
          d[r * n + j] += y[j] * (g[j] - static_cast<float>(dot));
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t n = last_dim(x, "layer_norm");
  if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 || beta.dim(0) != n) {
    shape_fail("layer_norm", "scale " + shape_str(gamma.shape()) + " / shift " +
                                 shape_str(beta.shape()) + " do not match last axis of " +
                                 shape_str(x.shape()));
  }
  const std::size_t rows = n ? x.size() / n : 0;
  Tensor out = make(x.shape());
  std::vector<float> xhat(x.size());
  std::vector<float> rstd(rows);
  auto in = x.data();
  auto o = out.data();
  auto gm = gamma.data(), bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<float>(rs);
    for (std::size_t j = 0; j < n; ++j) {
      const float h = static_cast<float>((xr[j] - mu) * rs);
      xhat[r * n + j] = h;
      o[r * n + j] = h * gm[j] + bt[j];
    }
  }
  if (tracking({&x, &gamma, &beta})) {
    ImplPtr px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr(), po = out.ptr();
    record(out, [px, pg, pb, po, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const auto& g = po->grad;
      if (pg->requires_grad || pb->requires_grad) {
        float* dg = pg->requires_grad ? grad_buf(*pg) : nullptr;
        float* db = pb->requires_grad ? grad_buf(*pb) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) {
            if (dg) dg[j] += g[r * n + j] * xhat[r * n + j];
            if (db) db[j] += g[r * n + j];
          }
        }
      }
      if (px->requires_grad) {
        float* dx = grad_buf(*px);
        const float* gm = pg->data.data();
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = static_cast<double>(g[r * n + j]) * gm[j];
            s1 += gh;
            s2 += gh * xhat[r * n + j];
          }
          s1 /= static_cast<double>(n);
          s2 /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = static_cast<double>(g[r * n + j]) * gm[j];
            dx[r * n + j] += static_cast<float>(rstd[r] * (gh - s1 - xhat[r * n + j] * s2));
          }
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  Tensor out = make(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const float v = in[i];
    o[i] = 0.5f * v * (1.0f + std::tanh(kC * (v + kA * v * v * v)));
  }
  if (tracking({&x})) {
    ImplPtr px = x.ptr(), po = out.ptr();
    record(out, [px, po] {
      float* d = grad_buf(*px);
      const auto& g = po->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float v = px->data[i];
        const float u = kC * (v + kA * v * v * v);
        const float th = std::tanh(u);
        const float du = kC * (1.0f + 3.0f * kA * v * v);
        d[i] += g[i] * (0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du);
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) shape_fail("embedding", "table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  Tensor out = make({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      shape_fail("embedding", "id " + std::to_string(ids[i]) + " outside vocabulary of " +
                                  std::to_string(vocab));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data().data() + i * d);
  }
  if (tracking({&table})) {
    ImplPtr pt = table.ptr(), po = out.ptr();
    std::vector<int> idv(ids.begin(), ids.end());
    record(out, [pt, po, d, idv = std::move(idv)] {
      float* dt = grad_buf(*pt);
      for (std::size_t i = 0; i < idv.size(); ++i) {
        float* row = dt + static_cast<std::size_t>(idv[i]) * d;
        const float* g = po->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
      }
    });
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no operands");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) shape_fail("concat", "axis " + std::to_string(axis) + " out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != ref.size()) shape_fail("concat", "rank mismatch " + shape_str(p.shape()));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.shape()[i] != ref[i]) {
        shape_fail("concat", "shape " + shape_str(p.shape()) + " incompatible with " + shape_str(ref));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  Tensor out = make(out_shape);
  const AxisView ov = axis_view(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const AxisView pv = axis_view(p.shape(), axis);
    for (std::size_t o = 0; o < pv.outer; ++o) {
      std::copy_n(p.data().data() + o * pv.extent * pv.inner, pv.extent * pv.inner,
                  out.data().data() + (o * ov.extent + off) * ov.inner);
    }
    off += pv.extent;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (any && g_active_tape != nullptr) {
    std::vector<ImplPtr> ps;
    for (const Tensor& p : parts) ps.push_back(p.ptr());
    ImplPtr po = out.ptr();
    record(out, [ps = std::move(ps), po, offsets = std::move(offsets), axis, ov] {
      for (std::size_t k = 0; k < ps.size(); ++k) {
        if (!ps[k]->requires_grad) continue;
        const AxisView pv = axis_view(ps[k]->shape, axis);
        float* d = grad_buf(*ps[k]);
        for (std::size_t o = 0; o < pv.outer; ++o) {
          const float* g = po->grad.data() + (o * ov.extent + offsets[k]) * ov.inner;
          float* dd = d + o * pv.extent * pv.inner;
          for (std::size_t i = 0; i < pv.extent * pv.inner; ++i) dd[i] += g[i];
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank()) shape_fail("slice", "axis " + std::to_string(axis) + " out of range");
  if (start + length > x.shape()[axis]) {
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") exceeds axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor out = make(out_shape);
  const AxisView xv = axis_view(x.shape(), axis);
  for (std::size_t o = 0; o < xv.outer; ++o) {
    std::copy_n(x.data().data() + (o * xv.extent + start) * xv.inner, length * xv.inner,
                out.data().data() + o * length * xv.inner);
  }
  if (tracking({&x})) {
    ImplPtr px = x.ptr(), po = out.ptr();
    record(out, [px, po, xv, start, length] {
      float* d = grad_buf(*px);
      for (std::size_t o = 0; o < xv.outer; ++o) {
        const float* g = po->grad.data() + o * length * xv.inner;
        float* dd = d + (o * xv.extent + start) * xv.inner;
        for (std::size_t i = 0; i < length * xv.inner; ++i) dd[i] += g[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
  if (tracking({&x})) {
    ImplPtr px = x.ptr(), po = out.ptr();
    record(out, [px, po] {
      float* d = grad_buf(*px);
      for (std::size_t i = 0; i < po->grad.size(); ++i) d[i] += po->grad[i];
    });
  }
  return out;
}

Tensor swap_axes12(const Tensor& x) {
  if (x.rank() != 4) shape_fail("swap_axes12", "expected 4-D, got " + shape_str(x.shape()));
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  Tensor out = make({a, c, b, d});
  const float* in = x.data().data();
  float* o = out.data().data();
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < c; ++k)
        std::copy_n(in + ((i * b + j) * c + k) * d, d, o + ((i * c + k) * b + j) * d);
  if (tracking({&x})) {
    ImplPtr px = x.ptr(), po = out.ptr();
    record(out, [px, po, a, b, c, d] {
      float* dx = grad_buf(*px);
      const float* g = po->grad.data();
      for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
          for (std::size_t k = 0; k < c; ++k) {
            float* dst = dx + ((i * b + j) * c + k) * d;
            const float* src = g + ((i * c + k) * b + j) * d;
            for (std::size_t e = 0; e < d; ++e) dst[e] += src[e];
          }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t n = last_dim(x, "gather_rows");
  const std::size_t total = n ? x.size() / n : 0;
  Tensor out = make({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total) {
      shape_fail("gather_rows", "row " + std::to_string(rows[i]) + " out of range for " +
                                    shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + rows[i] * n, n, out.data().data() + i * n);
  }
  if (tracking({&x})) {
    ImplPtr px = x.ptr(), po = out.ptr();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    record(out, [px, po, n, rv = std::move(rv)] {
      float* d = grad_buf(*px);
      for (std::size_t i = 0; i < rv.size(); ++i) {
        const float* g = po->grad.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) d[rv[i] * n + j] += g[j];
      }
    });
  }
  return out;
}

Tensor identity(const Tensor& x) {
  Tensor out = Tensor::from_data(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  if (tracking({&x})) {
    ImplPtr px = x.ptr(), po = out.ptr();
    record(out, [px, po] {
      float* d = grad_buf(*px);
      for (std::size_t i = 0; i < po->grad.size(); ++i) d[i] += po->grad[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (tracking({&x})) {
    ImplPtr px = x.ptr(), po = out.ptr();
    record(out, [px, po] {
      float* d = grad_buf(*px);
      const float g = po->grad[0];
      for (std::size_t i = 0; i < px->data.size(); ++i) d[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0f / static_cast<float>(x.size()));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  if (logits.rank() != 2) {
    shape_fail("cross_entropy", "logits must be (N, V), got " + shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for " +
                                    std::to_string(rows) + " rows");
  }
  std::vector<float> probs(logits.size(), 0.0f);
  double total = 0.0;
  std::size_t counted = 0;
  auto in = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      shape_fail("cross_entropy", "target " + std::to_string(targets[r]) + " outside vocabulary of " +
                                      std::to_string(vocab));
    }
    const float* xr = in.data() + r * vocab;
    const float mx = *std::max_element(xr, xr + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const float e = std::exp(xr[j] - mx);
      probs[r * vocab + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] = static_cast<float>(probs[r * vocab + j] / z);
    total += std::log(z) + mx - xr[targets[r]];
    ++counted;
  }
  const float loss = counted ? static_cast<float>(total / static_cast<double>(counted)) : 0.0f;
  Tensor out = Tensor::scalar(loss);
  if (counted && tracking({&logits})) {
    ImplPtr pl = logits.ptr(), po = out.ptr();
    std::vector<int> tv(targets.begin(), targets.end());
    record(out, [pl, po, rows, vocab, counted, ignore_index, tv = std::move(tv),
                 probs = std::move(probs)] {
      float* d = grad_buf(*pl);
      const float g = po->grad[0] / static_cast<float>(counted);
      for (std::size_t r = 0; r < rows; ++r) {
        if (tv[r] == ignore_index) continue;
        for (std::size_t j = 0; j < vocab; ++j) d[r * vocab + j] += g * probs[r * vocab + j];
        d[r * vocab + static_cast<std::size_t>(tv[r])] -= g;
      }
    });
  }
  return out;
}

}  // namespace kc::ad
