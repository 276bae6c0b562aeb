#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "seed/errors.hpp"
#include "seed/fd_check.hpp"
#include "seed/ops.hpp"
#include "seed/optim.hpp"
#include "seed/random.hpp"

namespace seed {
namespace {

using ops::Mask;

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, bool grad = false) {
  return randn({r, c}, 1.0, rng, grad);
}

TEST(Matmul, IdentityAndProjection) {
  auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  auto out = ops::matmul(eye, m);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()),
            (std::vector<double>{1, 2, 3, 4}));

  auto p = Tensor::matrix(2, 2, {1, 0, 0, 0});
  auto v = Tensor::matrix(2, 1, {5, 7});
  auto pv = ops::matmul(p, v);
  EXPECT_EQ(pv[0], 5);
  EXPECT_EQ(pv[1], 0);
}

TEST(Matmul, MatchesTripleLoop) {
  PrecisionScope f64(Precision::f64);
  Rng rng(3);
  auto a = random_matrix(3, 4, rng);
  auto b = random_matrix(4, 2, rng);
  auto c = ops::matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += a.at(i, k) * b.at(k, j);
      EXPECT_LT(std::abs(acc - c.at(i, j)), 1e-12);
    }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    ops::matmul(a, b);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos);
  }
}

TEST(Softmax, ClosedFormRows) {
  PrecisionScope f64(Precision::f64);
  auto x = Tensor::matrix(3, 3, {0, 0, -1e300, 1000, 0, -1e300, 0, std::log(2.0),
                                 std::log(3.0)});
  // First two rows use a third column pushed to -inf-ish; check the pairs.
  auto y = ops::softmax_rows(x);
  EXPECT_NEAR(y.at(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(y.at(0, 1), 0.5, 1e-12);
  EXPECT_NEAR(y.at(1, 0), 1.0, 1e-12);
  EXPECT_NEAR(y.at(1, 1), 0.0, 1e-12);
  EXPECT_NEAR(y.at(2, 0), 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(y.at(2, 1), 2.0 / 6.0, 1e-12);
  EXPECT_NEAR(y.at(2, 2), 3.0 / 6.0, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
  PrecisionScope f64(Precision::f64);
  Rng rng(11);
  auto x = randn({20, 9}, 5.0, rng);
  auto y = ops::softmax_rows(x);
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GE(y.at(i, j), 0.0);
      s += y.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(LayerNorm, EdgeCases) {
  PrecisionScope f64(Precision::f64);
  auto g = Tensor::filled({2}, 1.0);
  auto b = Tensor::zeros({2});
  auto constant = ops::layer_norm(Tensor::matrix(1, 2, {3, 3}), g, b, 1e-5);
  EXPECT_EQ(constant[0], 0.0);
  EXPECT_EQ(constant[1], 0.0);
  auto unit = ops::layer_norm(Tensor::matrix(1, 2, {1, -1}), g, b, 1e-12);
  EXPECT_NEAR(unit[0], 1.0, 1e-9);
  EXPECT_NEAR(unit[1], -1.0, 1e-9);
  EXPECT_THROW(ops::layer_norm(Tensor::matrix(1, 2, {1, -1}), g, b, 0.0),
               ContractViolation);
}

TEST(LayerNorm, TwoPassStatistics) {
  PrecisionScope f64(Precision::f64);
  Rng rng(5);
  const std::size_t d = 17;
  auto x = randn({1, d}, 3.0, rng);
  auto y = ops::layer_norm(x, Tensor::filled({d}, 1.0), Tensor::zeros({d}), 1e-9);
  long double mean = 0, var = 0;
  for (std::size_t j = 0; j < d; ++j) mean += y[j];
  mean /= d;
  for (std::size_t j = 0; j < d; ++j) var += (y[j] - mean) * (y[j] - mean);
  var /= d;
  EXPECT_LT(std::abs(static_cast<double>(mean)), 1e-6);
  EXPECT_LT(std::abs(static_cast<double>(var) - 1.0), 1e-6);
}

TEST(Attention, SingleKeyReturnsValue) {
  PrecisionScope f64(Precision::f64);
  auto q = Tensor::matrix(1, 3, {0.3, -2, 1});
  auto k = Tensor::matrix(1, 3, {4, 5, 6});
  auto v = Tensor::matrix(1, 3, {7, 8, 9});
  auto y = ops::attention(q, k, v, ops::full_mask(1, 1));
  EXPECT_EQ(y[0], 7);
  EXPECT_EQ(y[1], 8);
  EXPECT_EQ(y[2], 9);
}

TEST(Attention, ExplicitExpansionThreeByThree) {
  PrecisionScope f64(Precision::f64);
  Rng rng(21);
  auto q = random_matrix(3, 2, rng);
  auto k = random_matrix(3, 2, rng);
  auto v = random_matrix(3, 2, rng);
  Mask mask = {1, 0, 1, 1, 1, 0, 0, 1, 1};
  auto y = ops::attention(q, k, v, mask);
  for (std::size_t i = 0; i < 3; ++i) {
    long double w[3] = {0, 0, 0}, z = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      if (!mask[i * 3 + j]) continue;
      long double s = (static_cast<long double>(q.at(i, 0)) * k.at(j, 0) +
                       static_cast<long double>(q.at(i, 1)) * k.at(j, 1)) /
                      std::sqrt(2.0L);
      w[j] = std::exp(s);
      z += w[j];
    }
    for (std::size_t c = 0; c < 2; ++c) {
      long double expect = 0;
      for (std::size_t j = 0; j < 3; ++j) expect += w[j] / z * v.at(j, c);
      EXPECT_NEAR(y.at(i, c), static_cast<double>(expect), 1e-12);
    }
  }
}

TEST(Attention, FullyMaskedRowIsContractViolation) {
  auto x = Tensor::zeros({2, 2});
  EXPECT_THROW(ops::attention(x, x, x, Mask{1, 0, 0, 0}), ContractViolation);
}

TEST(Attention, CausalPrefixIsBitIdentical) {
  Rng rng(8);
  const std::size_t n = 6, d = 8;
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_matrix(n, d, rng);
    auto k = random_matrix(n, d, rng);
    auto v = random_matrix(n, d, rng);
    const std::size_t j = rng() % n;
    auto k2 = k.clone();
    auto v2 = v.clone();
    for (std::size_t c = 0; c < d; ++c) {
      k2.data()[j * d + c] += 3.0;
      v2.data()[j * d + c] -= 1.5;
    }
    const ops::AttentionLayout layout{.batch = 1, .heads = 2, .query_len = n, .key_len = n};
    auto y1 = ops::multi_head_attention(q, k, v, ops::causal_mask(n), layout);
    auto y2 = ops::multi_head_attention(q, k2, v2, ops::causal_mask(n), layout);
    for (std::size_t i = 0; i < j * d; ++i) ASSERT_EQ(y1[i], y2[i]);
  }
}

TEST(Attention, MaskLocalityProperty) {
  // Changing a disallowed key/value leaves that query row bit-identical.
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t lq = 1 + rng() % 4, lk = 1 + rng() % 5, d = 4;
    Mask mask(lq * lk);
    for (auto& m : mask) m = rng() % 2;
    for (std::size_t i = 0; i < lq; ++i) mask[i * lk + rng() % lk] = 1;
    auto q = random_matrix(lq, d, rng);
    auto k = random_matrix(lk, d, rng);
    auto v = random_matrix(lk, d, rng);
    const std::size_t j = rng() % lk;
    auto k2 = k.clone();
    auto v2 = v.clone();
    for (std::size_t c = 0; c < d; ++c) {
      k2.data()[j * d + c] = 0.0;
      v2.data()[j * d + c] = 0.0;
    }
    auto y1 = ops::attention(q, k, v, mask);
    auto y2 = ops::attention(q, k2, v2, mask);
    for (std::size_t i = 0; i < lq; ++i) {
      if (mask[i * lk + j]) continue;
      for (std::size_t c = 0; c < d; ++c) ASSERT_EQ(y1.at(i, c), y2.at(i, c));
    }
  }
}

TEST(CrossEntropy, ClosedForms) {
  PrecisionScope f64(Precision::f64);
  auto uniform = Tensor::zeros({1, 8});
  std::vector<std::size_t> t = {3};
  std::vector<double> w = {1.0};
  EXPECT_NEAR(ops::cross_entropy(uniform, t, w).item(), std::log(8.0), 1e-12);
  auto certain = Tensor::zeros({1, 8});
  certain.data()[3] = 1000.0;
  EXPECT_NEAR(ops::cross_entropy(certain, t, w).item(), 0.0, 1e-9);
  std::vector<double> zero = {0.0};
  EXPECT_THROW(ops::cross_entropy(uniform, t, zero), ContractViolation);
}

TEST(CrossEntropy, MatchesExtendedPrecisionOracle) {
  PrecisionScope f64(Precision::f64);
  Rng rng(17);
  auto logits = randn({5, 7}, 4.0, rng);
  std::vector<std::size_t> targets = {0, 6, 3, 2, 2};
  std::vector<double> weights = {1.0, 0.5, 0.0, 2.0, 1.0};
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    long double z = 0;
    for (std::size_t j = 0; j < 7; ++j) z += std::exp(static_cast<long double>(logits.at(i, j)));
    num += weights[i] * (std::log(z) - logits.at(i, targets[i]));
    den += weights[i];
  }
  EXPECT_NEAR(ops::cross_entropy(logits, targets, weights).item(),
              static_cast<double>(num / den), 1e-12);
}

TEST(FdCheck, QuadraticIsExact) {
  Rng rng(1);
  auto theta = randn({6, 5}, 1.0, rng, true);
  auto result = fd_check([&] { return ops::sum(ops::mul(theta, theta)); },
                         {{"theta", theta}}, 1e-4);
  EXPECT_LT(result.max_relative_error, 1e-9);
  EXPECT_EQ(result.coordinates, 30u);
}

TEST(FdCheck, CoversEveryDifferentiableOp) {
  Rng rng(2);
  auto a = randn({4, 6}, 0.5, rng, true);
  auto w = randn({6, 6}, 0.5, rng, true);
  auto g = randn({6}, 0.5, rng, true);
  auto b = randn({6}, 0.5, rng, true);
  auto table = randn({5, 6}, 0.5, rng, true);
  auto temp = Tensor::scalar(0.7, true);
  std::vector<std::size_t> ids = {1, 4, 4, 0};
  std::vector<std::size_t> targets = {2, 0, 5, 1};
  std::vector<double> weights = {1, 0, 1, 1};
  auto loss_fn = [&] {
    auto x = ops::add(a, ops::embedding(table, ids));
    auto h = ops::layer_norm(ops::matmul(x, w), g, b);
    h = ops::gelu(h);
    auto att = ops::multi_head_attention(h, h, ops::scale(h, 0.3), ops::causal_mask(4),
                                         {.batch = 1, .heads = 2, .query_len = 4, .key_len = 4});
    auto logits = ops::div_by_scalar(ops::add_row(att, b), temp);
    auto ce = ops::cross_entropy(logits, targets, weights);
    auto cos = ops::mean(ops::cosine_similarity(ops::l2_normalize(x), h));
    auto mse = ops::mse_loss(ops::softmax_rows(h), ops::transpose(ops::transpose(x)));
    auto sel = ops::sum(ops::select_rows(ops::reshape(h, {2, 12}), std::vector<std::size_t>{1, 1}));
    auto parts = std::vector<Tensor>{ops::slice_rows(h, 0, 2), ops::slice_rows(x, 1, 1)};
    auto cat = ops::mean(ops::concat_rows(parts));
    return ops::add(ops::add(ops::add(ce, ops::scale(cos, 0.5)), ops::sub(mse, sel)), cat);
  };
  auto result = fd_check(loss_fn,
                         {{"a", a}, {"w", w}, {"g", g}, {"b", b}, {"table", table}, {"temp", temp}},
                         1e-5);
  EXPECT_LT(result.max_relative_error, 1e-5) << result.worst_param << "[" << result.worst_index
                                             << "]";
}

TEST(Adjoints, Linearity) {
  Rng rng(4);
  auto w = randn({3, 3}, 1.0, rng, true);
  auto x = randn({2, 3}, 1.0, rng);
  auto loss1 = [&] { return ops::sum(ops::gelu(ops::matmul(x, w))); };
  auto loss2 = [&] { return ops::mean(ops::softmax_rows(ops::matmul(x, w))); };
  auto grad_of = [&](auto fn) {
    Tape tape(Precision::f64);
    TapeScope scope(tape);
    w.zero_grad();
    auto l = fn();
    tape.backward(l);
    std::vector<double> g(w.grad().begin(), w.grad().end());
    w.zero_grad();
    return g;
  };
  const double ca = 0.7, cb = -2.5;
  auto g1 = grad_of(loss1);
  auto g2 = grad_of(loss2);
  auto gc = grad_of([&] { return ops::add(ops::scale(loss1(), ca), ops::scale(loss2(), cb)); });
  for (std::size_t i = 0; i < g1.size(); ++i) {
    EXPECT_NEAR(gc[i], ca * g1[i] + cb * g2[i], 1e-10);
  }
}

TEST(Adjoints, DeterministicWithinProcess) {
  auto run = [] {
    Rng rng(12);
    auto w = randn({4, 4}, 1.0, rng, true);
    auto x = randn({3, 4}, 1.0, rng);
    Tape tape;
    TapeScope scope(tape);
    auto h = ops::matmul(x, w);
    auto l = ops::add(ops::sum(ops::gelu(h)), ops::sum(ops::mul(h, h)));
    tape.backward(l);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(l.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adjoints, F32ModeRoundsForwardValues) {
  auto x = Tensor::scalar(1.0 / 3.0);
  auto y = ops::scale(x, 1.0);
  EXPECT_EQ(y.item(), static_cast<double>(static_cast<float>(1.0 / 3.0)));
  PrecisionScope f64(Precision::f64);
  EXPECT_EQ(ops::scale(x, 1.0).item(), 1.0 / 3.0);
}

TEST(Adjoints, StraightThroughPassesIdentity) {
  PrecisionScope f64(Precision::f64);
  auto x = Tensor::matrix(1, 2, {0.2, 0.4}, true);
  auto q = Tensor::matrix(1, 2, {1.0, -1.0});
  Tape tape(Precision::f64);
  TapeScope scope(tape);
  auto y = ops::straight_through(x, q);
  EXPECT_EQ(y[0], 1.0);
  auto l = ops::sum(ops::mul(y, y));
  tape.backward(l);
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], -2.0);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  PrecisionScope f64(Precision::f64);
  auto p = Tensor::matrix(1, 2, {1.0, -1.0}, true);
  AdamW opt({{"p", p, false}}, {});
  p.grad()[0] = 0.5;
  p.grad()[1] = -2.0;
  opt.step(0.1);
  // Bias-corrected first step is lr * sign(g) up to eps.
  EXPECT_NEAR(p[0], 0.9, 1e-6);
  EXPECT_NEAR(p[1], -0.9, 1e-6);
}

TEST(AdamW, RowRangeFreezesOtherRows) {
  auto p = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}, true);
  AdamW opt({{.name = "p", .tensor = p, .decay = true, .row_begin = 1, .row_end = 2}}, {});
  for (auto& g : p.grad()) g = 1.0;
  opt.step(0.01);
  EXPECT_EQ(p[0], 1);
  EXPECT_EQ(p[1], 2);
  EXPECT_NE(p[2], 3);
  EXPECT_EQ(p[4], 5);
  EXPECT_EQ(opt.trainable_count(), 2u);
}

TEST(Schedule, WarmupThenCosine) {
  EXPECT_NEAR(cosine_lr(0, 100, 1.0, 0.03), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(cosine_lr(2, 100, 1.0, 0.03), 1.0, 1e-12);
  EXPECT_NEAR(cosine_lr(100, 100, 1.0, 0.03), 0.0, 1e-12);
  EXPECT_GT(cosine_lr(50, 100, 1.0, 0.03), cosine_lr(60, 100, 1.0, 0.03));
}

}  // namespace
}  // namespace seed
