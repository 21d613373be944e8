#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "test_util.hpp"
#include "ulsa/autograd.hpp"
#include "ulsa/checkpoint.hpp"
#include "ulsa/error.hpp"
#include "ulsa/gradcheck.hpp"
#include "ulsa/ops.hpp"

using namespace ulsa;
using ulsa::testing::random_tensor;
using ulsa::testing::TempDir;

namespace {

constexpr double kTol = 1e-4;

// Weighted sum so every output element gets a distinct upstream gradient.
Var reduce(Var y, Rng& rng) {
  Tensor w = random_tensor(y.shape(), rng);
  return ops::sum(ops::mul(y, y.tape().constant(w)));
}

void expect_grad_ok(const ScalarFn& f, const std::vector<Tensor>& in) {
  const auto r = check_gradients(f, in);
  EXPECT_LT(r.max_rel_error, kTol) << "worst input " << r.worst_input;
  EXPECT_GT(r.checked, 0u);
}

}  // namespace

TEST(Tensor, RejectsDataOfWrongSize) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeMismatch);
  EXPECT_THROW(Tensor({2}).reshaped({3}), ShapeMismatch);
}

TEST(Tensor, CheckFiniteNamesTheSite) {
  Tensor t({2}, 0.0);
  t[1] = std::nan("");
  try {
    t.check_finite("probe");
    FAIL();
  } catch (const NonFinite& e) {
    EXPECT_NE(std::string(e.what()).find("probe"), std::string::npos);
  }
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(3.0));
  Var y = ops::mul(x, x);  // x^2
  Var z = ops::add(y, x);  // x^2 + x
  t.backward(z);
  EXPECT_DOUBLE_EQ(x.grad().item(), 7.0);
}

TEST(Autograd, ConstantsGetNoGradientAndSkipBackward) {
  Tape t;
  Var c = t.constant(Tensor::scalar(2.0));
  Var x = t.leaf(Tensor::scalar(5.0));
  Var y = ops::mul(c, c);
  EXPECT_FALSE(y.requires_grad());
  Var z = ops::mul(y, x);
  t.backward(z);
  EXPECT_DOUBLE_EQ(x.grad().item(), 4.0);
  EXPECT_EQ(t.grad_if_any(c.id()), nullptr);
}

TEST(Autograd, ZeroGradAllowsSecondSweep) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(1.5));
  Var y = ops::scale(x, 4.0);
  t.backward(y);
  t.zero_grad();
  t.backward(y);
  EXPECT_DOUBLE_EQ(x.grad().item(), 4.0);
}

TEST(Autograd, DetachBlocksGradient) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2.0));
  Var y = ops::add(ops::mul(ops::detach(x), x), x);
  t.backward(y);
  EXPECT_DOUBLE_EQ(x.grad().item(), 3.0);  // d/dx (c*x + x), c = 2
}

TEST(Ops, ShapeErrorsCarryBothShapes) {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({3, 2}));
  try {
    ops::add(a, b);
    FAIL();
  } catch (const ShapeMismatch& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("(2, 3)"), std::string::npos) << m;
    EXPECT_NE(m.find("(3, 2)"), std::string::npos) << m;
  }
}

TEST(Ops, LogOfZeroTripsNonFinite) {
  Tape t;
  EXPECT_THROW(ops::log(t.constant(Tensor({2}, 0.0))), NonFinite);
}

TEST(Ops, ConvMatchesDirectLoop) {
  Rng rng(1);
  Tensor x = random_tensor({2, 3, 5, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng);
  Tape t;
  Tensor y = ops::conv2d(t.constant(x), t.constant(w), 2, 1).value();
  ASSERT_EQ(y.shape(), (Shape{2, 4, 3, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < 3; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                const int yy = static_cast<int>(i * 2) + ki - 1, xx = static_cast<int>(j * 2) + kj - 1;
                if (yy < 0 || yy >= 5 || xx < 0 || xx >= 6) continue;
                acc += x[((n * 3 + c) * 5 + yy) * 6 + xx] * w[((o * 3 + c) * 3 + ki) * 3 + kj];
              }
          EXPECT_NEAR(y[((n * 4 + o) * 3 + i) * 3 + j], acc, 1e-12);
        }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(2);
  Tape t;
  Tensor y = ops::softmax(t.constant(random_tensor({2, 4, 3}, rng, -30, 30))).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 3; ++p) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += y[(n * 4 + c) * 3 + p];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Ops, CosineOfIdenticalRowsIsExactlyOne) {
  Rng rng(3);
  Tensor a = random_tensor({4, 7}, rng);
  Tape t;
  Tensor c = ops::cosine_similarity(t.constant(a), t.constant(a)).value();
  for (double v : c.vec()) EXPECT_EQ(v, 1.0);
}

TEST(Ops, GroupNormIsPerSample) {
  Rng rng(4);
  Tensor x = random_tensor({3, 4, 2, 2}, rng);
  Tensor g({4}, 1.0), b({4}, 0.0);
  Tape t;
  Tensor full = ops::group_norm(t.constant(x), t.constant(g), t.constant(b), 2).value();
  Tensor one({1, 4, 2, 2}, std::vector<double>(x.vec().begin() + 16, x.vec().begin() + 32));
  Tensor solo = ops::group_norm(t.constant(one), t.constant(g), t.constant(b), 2).value();
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(full[16 + i], solo[i]);
}

TEST(Ops, NllRejectsOutOfRangeLabel) {
  Tape t;
  Var lp = ops::log_softmax(t.constant(Tensor({1, 3, 1, 1}, 0.0)));
  const int bad[] = {3};
  EXPECT_THROW(ops::nll_mean(lp, bad), Error);
}

// ---- gradient checks, one per differentiable op ----

TEST(GradCheck, Elementwise) {
  Rng rng(10);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  Rng wr(11);
  const Tensor w = random_tensor({3, 4}, wr);
  auto weighted = [w](Var y) { return ops::sum(ops::mul(y, y.tape().constant(w))); };
  expect_grad_ok([&](Tape&, std::span<const Var> v) { return weighted(ops::add(v[0], v[1])); }, {a, b});
  expect_grad_ok([&](Tape&, std::span<const Var> v) { return weighted(ops::sub(v[0], v[1])); }, {a, b});
  expect_grad_ok([&](Tape&, std::span<const Var> v) { return weighted(ops::mul(v[0], v[1])); }, {a, b});
  expect_grad_ok([&](Tape&, std::span<const Var> v) { return weighted(ops::scale(v[0], -2.5)); }, {a});
  expect_grad_ok([&](Tape&, std::span<const Var> v) { return weighted(ops::relu(v[0])); }, {a});
  Tensor pos = random_tensor({3, 4}, rng, 0.2, 2.0);
  expect_grad_ok([&](Tape&, std::span<const Var> v) { return weighted(ops::log(v[0])); }, {pos});
  expect_grad_ok([&](Tape&, std::span<const Var> v) { return ops::mean(ops::mul(v[0], v[0])); }, {a});
}

TEST(GradCheck, LinearAlgebra) {
  Rng rng(12);
  Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 2}, rng), bias = random_tensor({2}, rng);
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(13);
        return reduce(ops::add_bias(ops::matmul(v[0], v[1]), v[2]), r);
      },
      {a, b, bias});
}

TEST(GradCheck, Convolution) {
  Rng rng(14);
  Tensor x = random_tensor({2, 2, 6, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), w1 = random_tensor({3, 2, 1, 1}, rng);
  for (std::size_t stride : {1u, 2u}) {
    expect_grad_ok(
        [&](Tape&, std::span<const Var> v) {
          Rng r(15);
          return reduce(ops::conv2d(v[0], v[1], stride, 1), r);
        },
        {x, w});
    expect_grad_ok(
        [&](Tape&, std::span<const Var> v) {
          Rng r(16);
          return reduce(ops::conv2d(v[0], v[1], stride, 0), r);
        },
        {x, w1});
  }
}

TEST(GradCheck, PoolingResampling) {
  Rng rng(17);
  Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 2, 4, 4}, rng);
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(18);
        return reduce(ops::max_pool2d(v[0], 2, 2), r);
      },
      {x});
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(19);
        return reduce(ops::adaptive_avg_pool(v[0]), r);
      },
      {x});
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(20);
        return reduce(ops::upsample2x(v[0]), r);
      },
      {x});
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(21);
        return reduce(ops::concat_channels(v[0], v[1]), r);
      },
      {x, y});
}

TEST(GradCheck, Normalization) {
  Rng rng(22);
  Tensor x = random_tensor({2, 4, 3, 3}, rng), g = random_tensor({4}, rng, 0.5, 1.5), b = random_tensor({4}, rng);
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(23);
        return reduce(ops::group_norm(v[0], v[1], v[2], 2), r);
      },
      {x, g, b});
}

TEST(GradCheck, SoftmaxFamily) {
  Rng rng(24);
  Tensor x = random_tensor({2, 3, 2, 2}, rng, -3, 3);
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(25);
        return reduce(ops::softmax(v[0]), r);
      },
      {x});
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(26);
        return reduce(ops::log_softmax(v[0]), r);
      },
      {x});
  const std::vector<int> tgt = {0, 2, 1, 1, 2, 0, 0, 1};
  expect_grad_ok([&](Tape&, std::span<const Var> v) { return ops::nll_mean(ops::log_softmax(v[0]), tgt); }, {x});
}

TEST(GradCheck, Cosine) {
  Rng rng(27);
  Tensor a = random_tensor({3, 5}, rng), b = random_tensor({3, 5}, rng);
  expect_grad_ok(
      [&](Tape&, std::span<const Var> v) {
        Rng r(28);
        return reduce(ops::cosine_similarity(v[0], v[1]), r);
      },
      {a, b});
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(30);
  std::vector<NamedTensor> ts = {{"a", random_tensor({2, 3}, rng)}, {"b.c", random_tensor({4}, rng)}, {"s", Tensor::scalar(-0.0)}};
  TempDir dir("ckpt");
  save_checkpoint(dir.path() / "x.ckpt", ts);
  auto back = load_checkpoint(dir.path() / "x.ckpt");
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back[i].name, ts[i].name);
    EXPECT_EQ(back[i].tensor, ts[i].tensor);
  }
}

TEST(Checkpoint, RejectsForeignFile) {
  TempDir dir("ckpt_bad");
  {
    std::ofstream f(dir.path() / "bad.ckpt", std::ios::binary);
    f << "NOTACKPT and some garbage";
  }
  EXPECT_THROW(load_checkpoint(dir.path() / "bad.ckpt"), Error);
  EXPECT_THROW(load_checkpoint(dir.path() / "missing.ckpt"), Error);
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  Rng a = Rng::stream(7, 1, 2), b = Rng::stream(7, 1, 2), c = Rng::stream(7, 2, 1);
  const auto va = a.next();
  EXPECT_EQ(va, b.next());
  EXPECT_NE(va, c.next());
}

TEST(Rng, IndexStaysInRange) {
  Rng r(5);
  for (int i = 0; i < 10000; ++i) EXPECT_LT(r.index(7), 7u);
}
