// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "kcircuits/autodiff.hpp"
#include "kcircuits/rng.hpp"

namespace ad = kc::ad;

namespace {

ad::Tensor random_tensor(ad::Shape shape, kc::Rng& rng, double sd = 1.0) {
  std::vector<float> v(ad::numel(shape));
  for (float& x : v) x = static_cast<float>(rng.normal() * sd);
  return ad::Tensor::from_data(std::move(shape), std::move(v), true);
}

// Central differences in double around float storage. The analytic gradient
// comes from one backward pass.
void expect_gradients_match(std::vector<ad::Tensor> inputs,
                            const std::function<ad::Tensor(const std::vector<ad::Tensor>&)>& f,
                            double step = 1e-3, double tol = 1e-2) {
  ad::Tape tape;
  {
    ad::TapeScope scope(tape);
    ad::Tensor loss = f(inputs);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& t = inputs[i];
    ASSERT_TRUE(t.has_grad()) << "input " << i << " received no gradient";
    auto data = t.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const float saved = data[k];
      data[k] = saved + static_cast<float>(step);
      const double up = f(inputs).item();
      data[k] = saved - static_cast<float>(step);
      const double down = f(inputs).item();
      data[k] = saved;
      const double numeric = (up - down) / (2 * step);
      const double analytic = t.grad()[k];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 0.05});
      EXPECT_LE(std::abs(numeric - analytic) / denom, tol)
          << "input " << i << " element " << k << " numeric " << numeric << " analytic " << analytic;
    }
  }
}

// Fixed weights turn a tensor into a scalar that depends on every element.
ad::Tensor weighted_sum(const ad::Tensor& x) {
  std::vector<float> w(x.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.37f * static_cast<float>(i) + 0.1f);
  return ad::sum(ad::mul(x, ad::Tensor::from_data(x.shape(), w)));
}

}  // namespace

TEST(Autodiff, MatmulForwardMatchesNaiveLoop) {
  kc::Rng rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto c = ad::matmul(a, b);
  ASSERT_EQ(c.shape(), (ad::Shape{3, 5}));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double ref = 0;
      for (std::size_t k = 0; k < 4; ++k) ref += a.data()[i * 4 + k] * b.data()[k * 5 + j];
      EXPECT_NEAR(c.data()[i * 5 + j], ref, 1e-5);
    }
  }
  auto bt = random_tensor({5, 4}, rng);
  auto ct = ad::matmul(a, bt, true);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double ref = 0;
      for (std::size_t k = 0; k < 4; ++k) ref += a.data()[i * 4 + k] * bt.data()[j * 4 + k];
      EXPECT_NEAR(ct.data()[i * 5 + j], ref, 1e-5);
    }
  }
}

TEST(Autodiff, MatmulGradients) {
  kc::Rng rng(2);
  expect_gradients_match({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                         [](const auto& in) { return weighted_sum(ad::matmul(in[0], in[1])); });
  expect_gradients_match({random_tensor({2, 3, 4}, rng), random_tensor({5, 4}, rng)},
                         [](const auto& in) { return weighted_sum(ad::matmul(in[0], in[1], true)); });
}

TEST(Autodiff, BmmGradients) {
  kc::Rng rng(3);
  expect_gradients_match({random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 3}, rng)},
                         [](const auto& in) { return weighted_sum(ad::bmm(in[0], in[1])); });
  expect_gradients_match({random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)},
                         [](const auto& in) { return weighted_sum(ad::bmm(in[0], in[1], true)); });
}

TEST(Autodiff, ElementwiseGradients) {
  kc::Rng rng(4);
  expect_gradients_match({random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}, [](const auto& in) {
    return weighted_sum(ad::mul(ad::add(in[0], in[1]), ad::sub(in[0], ad::scale(in[1], 0.5f))));
  });
  expect_gradients_match({random_tensor({4, 3}, rng), random_tensor({3}, rng)},
                         [](const auto& in) { return weighted_sum(ad::add_bias(in[0], in[1])); });
}

TEST(Autodiff, SoftmaxRowsSumToOneAndRespectCausalMask) {
  kc::Rng rng(5);
  auto x = random_tensor({2, 4, 4}, rng, 3.0);
  auto p = ad::softmax(x, true);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        const float v = p.data()[(b * 4 + i) * 4 + j];
        if (j > i) EXPECT_EQ(v, 0.0f);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Autodiff, SoftmaxGradients) {
  kc::Rng rng(6);
  expect_gradients_match({random_tensor({3, 5}, rng)},
                         [](const auto& in) { return weighted_sum(ad::softmax(in[0])); });
  expect_gradients_match({random_tensor({2, 4, 4}, rng)},
                         [](const auto& in) { return weighted_sum(ad::softmax(in[0], true)); });
}

TEST(Autodiff, LayerNormForwardAndGradients) {
  kc::Rng rng(7);
  auto x = random_tensor({3, 6}, rng, 2.0);
  auto g = random_tensor({6}, rng);
  auto b = random_tensor({6}, rng);
  auto y = ad::layer_norm(x, g, b, 1e-5f);
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (std::size_t k = 0; k < 6; ++k) mu += x.data()[r * 6 + k];
    mu /= 6;
    for (std::size_t k = 0; k < 6; ++k) var += std::pow(x.data()[r * 6 + k] - mu, 2);
    var /= 6;
    for (std::size_t k = 0; k < 6; ++k) {
      const double ref = (x.data()[r * 6 + k] - mu) / std::sqrt(var + 1e-5) * g.data()[k] + b.data()[k];
      EXPECT_NEAR(y.data()[r * 6 + k], ref, 1e-4);
    }
  }
  expect_gradients_match({x, g, b}, [](const auto& in) {
    return weighted_sum(ad::layer_norm(in[0], in[1], in[2], 1e-5f));
  });
}

TEST(Autodiff, GeluMatchesTanhFormulaAndGradients) {
  kc::Rng rng(8);
  auto x = random_tensor({10}, rng, 2.0);
  auto y = ad::gelu(x);
  for (std::size_t i = 0; i < 10; ++i) {
    const double v = x.data()[i];
    const double ref = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    EXPECT_NEAR(y.data()[i], ref, 1e-5);
  }
  expect_gradients_match({x}, [](const auto& in) { return weighted_sum(ad::gelu(in[0])); });
}

TEST(Autodiff, EmbeddingAccumulatesRepeatedRows) {
  kc::Rng rng(9);
  const std::vector<int> ids{2, 0, 2, 1};
  expect_gradients_match({random_tensor({3, 4}, rng)},
                         [&](const auto& in) { return weighted_sum(ad::embedding(in[0], ids)); });
}

TEST(Autodiff, ShapeOpsGradients) {
  kc::Rng rng(10);
  expect_gradients_match({random_tensor({2, 3, 4, 2}, rng)}, [](const auto& in) {
    return weighted_sum(ad::reshape(ad::swap_axes12(in[0]), {8, 3, 2}));
  });
  expect_gradients_match({random_tensor({3, 5}, rng)},
                         [](const auto& in) { return weighted_sum(ad::slice(in[0], 1, 1, 3)); });
  expect_gradients_match({random_tensor({4, 2}, rng)},
                         [](const auto& in) { return weighted_sum(ad::slice(in[0], 0, 2, 2)); });
  expect_gradients_match({random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)}, [](const auto& in) {
    std::vector<ad::Tensor> parts{in[0], in[1]};
    return weighted_sum(ad::concat(parts, 1));
  });
  const std::vector<std::size_t> rows{3, 0, 3};
  expect_gradients_match({random_tensor({4, 3}, rng)},
                         [&](const auto& in) { return weighted_sum(ad::gather_rows(in[0], rows)); });
  expect_gradients_match({random_tensor({3, 2}, rng)},
                         [](const auto& in) { return ad::mean(ad::mul(ad::identity(in[0]), in[0])); });
}

TEST(Autodiff, CrossEntropyMatchesLogSumExpAndIgnoresMaskedRows) {
  kc::Rng rng(11);
  auto logits = random_tensor({3, 5}, rng, 2.0);
  const std::vector<int> targets{4, -1, 0};
  const double got = ad::cross_entropy(logits, targets).item();
  double ref = 0;
  for (std::size_t r : {0u, 2u}) {
    double m = -1e30, s = 0;
    for (std::size_t k = 0; k < 5; ++k) m = std::max<double>(m, logits.data()[r * 5 + k]);
    for (std::size_t k = 0; k < 5; ++k) s += std::exp(logits.data()[r * 5 + k] - m);
    ref += m + std::log(s) - logits.data()[r * 5 + targets[r]];
  }
  EXPECT_NEAR(got, ref / 2, 1e-5);
  expect_gradients_match({logits}, [&](const auto& in) { return ad::cross_entropy(in[0], targets); });

  const std::vector<int> none{-1, -1, -1};
  EXPECT_EQ(ad::cross_entropy(logits, none).item(), 0.0f);
}

TEST(Autodiff, GradientsAccumulateAcrossBackwardCalls) {
  auto x = ad::Tensor::from_data({2}, {1.0f, 2.0f}, true);
  for (int rep = 0; rep < 2; ++rep) {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    tape.backward(ad::sum(ad::scale(x, 3.0f)));
  }
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 6.0f);
}

TEST(Autodiff, NothingRecordedWithoutTapeOrGradFlag) {
  ad::Tape tape;
  ad::TapeScope scope(tape);
  auto a = ad::Tensor::from_data({2}, {1.0f, 2.0f});
  auto b = ad::add(a, a);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_THROW(tape.backward(ad::sum(b)), ad::ContractError);
}

TEST(Autodiff, ErrorsAreTyped) {
  auto a = ad::Tensor::zeros({2, 3}, true);
  auto b = ad::Tensor::zeros({2, 3}, true);
  EXPECT_THROW(ad::matmul(a, b), ad::ShapeError);
  EXPECT_THROW(ad::add(a, ad::Tensor::zeros({3, 2})), ad::ShapeError);
  EXPECT_THROW(ad::Tensor::from_data({2, 2}, {1.0f}), ad::ShapeError);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  auto c = ad::add(a, b);
  EXPECT_THROW(tape.backward(c), ad::ContractError);
}
