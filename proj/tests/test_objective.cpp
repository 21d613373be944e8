#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "ulsa/error.hpp"
#include "ulsa/gradcheck.hpp"
#include "ulsa/model.hpp"
#include "ulsa/objective.hpp"
#include "ulsa/ops.hpp"

using namespace ulsa;
using ulsa::testing::random_tensor;

namespace {

FeaturePyramid pyramid(Tape& t, const std::vector<std::vector<double>>& rows, bool leaf = false) {
  FeaturePyramid p;
  for (const auto& r : rows) {
    Tensor v({1, r.size()}, r);
    p.pooled.push_back(leaf ? t.leaf(v) : t.constant(v));
  }
  return p;
}

EncoderConfig tiny() {
  EncoderConfig e;
  e.num_blocks = 2;
  e.base_channels = 4;
  e.norm_groups = 2;
  return e;
}

}  // namespace

TEST(SupervisedLoss, UniformLogitsGiveLogK) {
  Tape t;
  std::vector<int> tgt = {0, 1, 2, 3, 0, 1};
  Var l = supervised_loss(t.constant(Tensor({1, 4, 2, 3}, 0.7)), tgt, Task::segmentation);
  EXPECT_NEAR(l.value().item(), std::log(4.0), 1e-15);
}

TEST(SupervisedLoss, ConfidentCorrectApproachesZero) {
  Tape t;
  Tensor logits({2, 2}, 0.0);
  logits[0] = 50.0;  // sample 0 -> class 0
  logits[3] = 50.0;  // sample 1 -> class 1
  std::vector<int> tgt = {0, 1};
  EXPECT_LT(supervised_loss(t.constant(logits), tgt, Task::classification).value().item(), 1e-20);
}

TEST(SupervisedLoss, HandComputed2x2Mask) {
  // Two classes, one image, 2x2 pixels.
  const double z0[] = {0.3, -1.2, 2.0, 0.0}, z1[] = {1.1, 0.4, -0.5, 0.0};
  const int y[] = {1, 0, 0, 1};
  double expect = 0.0;
  for (int p = 0; p < 4; ++p) {
    const double lse = std::log(std::exp(z0[p]) + std::exp(z1[p]));
    expect += lse - (y[p] == 0 ? z0[p] : z1[p]);
  }
  expect /= 4.0;
  Tensor logits({1, 2, 2, 2}, {0.3, -1.2, 2.0, 0.0, 1.1, 0.4, -0.5, 0.0});
  Tape t;
  EXPECT_NEAR(supervised_loss(t.constant(logits), y, Task::segmentation).value().item(), expect, 1e-10);
}

TEST(SupervisedLoss, RejectsBadLabels) {
  Tape t;
  std::vector<int> two = {0, 2};
  EXPECT_THROW(supervised_loss(t.constant(Tensor({2, 2})), two, Task::classification), Error);
  std::vector<int> seg = {0, 3, 0, 0};
  EXPECT_THROW(supervised_loss(t.constant(Tensor({1, 3, 2, 2})), seg, Task::segmentation), Error);
}

TEST(FclLoss, IdenticalPyramidsGiveMinusOne) {
  Tape t;
  auto a = pyramid(t, {{0.2, -0.4, 1.0}, {3.0, 1.0}});
  EXPECT_EQ(fcl_loss(a, a).loss.value().item(), -1.0);
}

TEST(FclLoss, OrthogonalGivesZero) {
  Tape t;
  auto a = pyramid(t, {{1, 0}, {0, 2}}), b = pyramid(t, {{0, 3}, {5, 0}});
  EXPECT_EQ(fcl_loss(a, b).loss.value().item(), 0.0);
}

TEST(FclLoss, ClosedFormTwoBlocks) {
  Tape t;
  auto real = pyramid(t, {{1, 0}, {1, 1}}), aug = pyramid(t, {{1, 0}, {1, 0}});
  const auto r = fcl_loss(real, aug);
  EXPECT_NEAR(r.loss.value().item(), -(1.0 + 1.0 / std::sqrt(2.0)) / 2.0, 1e-15);
  ASSERT_EQ(r.per_block_cosine.size(), 2u);
  EXPECT_NEAR(r.per_block_cosine[1], 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(FclLoss, LastOnlyUsesDeepestBlock) {
  Tape t;
  auto real = pyramid(t, {{1, 0}, {1, 1}}), aug = pyramid(t, {{0, 1}, {1, 0}});
  const auto r = fcl_loss(real, aug, FclBlocks::last_only);
  EXPECT_NEAR(r.loss.value().item(), -1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_EQ(r.per_block_cosine.size(), 1u);
}

TEST(FclLoss, LengthMismatchRejected) {
  Tape t;
  auto a = pyramid(t, {{1, 0}}), b = pyramid(t, {{1, 0}, {0, 1}});
  EXPECT_THROW(fcl_loss(a, b), ShapeMismatch);
}

TEST(FclLoss, RangeOnRandomPyramids) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tape t;
    FeaturePyramid a, b;
    for (int i = 0; i < 3; ++i) {
      a.pooled.push_back(t.constant(random_tensor({4, 6}, rng)));
      b.pooled.push_back(t.constant(random_tensor({4, 6}, rng)));
    }
    const auto r = fcl_loss(a, b);
    const double v = r.loss.value().item();
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
    double m = 0.0;
    for (double c : r.per_block_cosine) {
      EXPECT_GE(c, -1.0);
      EXPECT_LE(c, 1.0);
      m += c;
    }
    EXPECT_NEAR(v, -m / 3.0, 1e-12);
  }
}

TEST(TotalLoss, WeightedSum) {
  Tape t;
  Var sup = t.constant(Tensor::scalar(0.5));
  FclResult u{t.constant(Tensor::scalar(-0.9)), {0.9}};
  const auto r = total_loss(sup, &u, 1.0);
  EXPECT_NEAR(r.loss.value().item(), -0.4, 1e-15);
  EXPECT_NEAR(r.report.total, r.report.supervised + 1.0 * r.report.unsupervised, 1e-12);
}

TEST(TotalLoss, ZeroWeightIsSupervisedBitExact) {
  Tape t;
  Var sup = t.constant(Tensor::scalar(0.123456789));
  FclResult u{t.constant(Tensor::scalar(-0.7)), {0.7}};
  const auto r = total_loss(sup, &u, 0.0);
  EXPECT_EQ(r.loss.value().item(), 0.123456789);
  EXPECT_EQ(r.loss.id(), sup.id());
}

TEST(TotalLoss, NegativeWeightRejected) {
  Tape t;
  Var sup = t.constant(Tensor::scalar(1.0));
  EXPECT_THROW(total_loss(sup, nullptr, -0.1), ConfigError);
}

namespace {

struct Branches {
  std::vector<Tensor> sup, unsup, total;
};

// Gradients of L_S, L_U and L_S + lambda L_U with respect to the parameters.
Branches branch_gradients(const Model& m, double lambda) {
  Rng rng(21);
  Tensor xl = random_tensor({2, 3, 8, 8}, rng), xr = random_tensor({2, 3, 8, 8}, rng),
         xa = random_tensor({2, 3, 8, 8}, rng);
  std::vector<int> tgt(2 * 64);
  for (auto& v : tgt) v = static_cast<int>(rng.index(3));
  Branches out;
  for (int which = 0; which < 3; ++which) {
    Tape t;
    BoundModel bm(m, t);
    Var sup = supervised_loss(bm.predict(t.constant(xl)), tgt, Task::segmentation);
    FclResult u = fcl_loss(bm.encode(t.constant(xr), true), bm.encode(t.constant(xa)));
    Var root = which == 0 ? sup : which == 1 ? u.loss : total_loss(sup, &u, lambda).loss;
    t.backward(root);
    (which == 0 ? out.sup : which == 1 ? out.unsup : out.total) = bm.gradients();
  }
  return out;
}

}  // namespace

TEST(TotalLoss, GradientIsLinearInTerms) {
  Model m(tiny(), {Task::segmentation, 3}, 5);
  const double lambda = 0.7;
  const auto g = branch_gradients(m, lambda);
  for (std::size_t i = 0; i < g.total.size(); ++i)
    for (std::size_t k = 0; k < g.total[i].size(); ++k)
      EXPECT_NEAR(g.total[i][k], g.sup[i][k] + lambda * g.unsup[i][k], 1e-12);
}

TEST(FclLoss, RealBranchContributesNoGradient) {
  // Branch isolation: gradients of L_U must equal those obtained when the
  // real pyramid is a precomputed constant.
  Model m(tiny(), {Task::segmentation, 3}, 6);
  Rng rng(6);
  Tensor xr = random_tensor({2, 3, 8, 8}, rng), xa = random_tensor({2, 3, 8, 8}, rng);
  std::vector<Tensor> g_detached, g_folded;
  {
    Tape t;
    BoundModel bm(m, t);
    t.backward(fcl_loss(bm.encode(t.constant(xr), true), bm.encode(t.constant(xa))).loss);
    g_detached = bm.gradients();
  }
  FeaturePyramid folded_values;
  Tape t0;
  {
    BoundModel frozen(m, t0, false);
    folded_values = frozen.encode(t0.constant(xr));
  }
  {
    Tape t;
    BoundModel bm(m, t);
    FeaturePyramid real;
    for (const auto& p : folded_values.pooled) real.pooled.push_back(t.constant(p.value()));
    t.backward(fcl_loss(real, bm.encode(t.constant(xa))).loss);
    g_folded = bm.gradients();
  }
  double maxdiff = 0.0;
  for (std::size_t i = 0; i < g_detached.size(); ++i) maxdiff = std::max(maxdiff, max_abs_diff(g_detached[i], g_folded[i]));
  EXPECT_EQ(maxdiff, 0.0);
}

TEST(FclLoss, GradientDescentRaisesCosine) {
  Model m(tiny(), {Task::segmentation, 3}, 7);
  Rng rng(7);
  Tensor xr = random_tensor({2, 3, 8, 8}, rng), xa = random_tensor({2, 3, 8, 8}, rng);
  double prev = -2.0;
  for (int step = 0; step < 10; ++step) {
    Tape t;
    BoundModel bm(m, t);
    auto r = fcl_loss(bm.encode(t.constant(xr), true), bm.encode(t.constant(xa)));
    const double cos = -r.loss.value().item();
    EXPECT_GT(cos, prev) << "step " << step;
    prev = cos;
    t.backward(r.loss);
    auto g = bm.gradients();
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t k = 0; k < g[i].size(); ++k) m.params()[i].tensor[k] -= 1e-3 * g[i][k];
  }
}

TEST(GradCheck, FclThroughModelWithDetachedBranch) {
  Model m(tiny(), {Task::segmentation, 3}, 8);
  Rng rng(8);
  Tensor xr = random_tensor({2, 3, 8, 8}, rng), xa = random_tensor({2, 3, 8, 8}, rng);
  std::vector<Tensor> inputs;
  for (const auto& p : m.params()) inputs.push_back(p.tensor);
  // The numerical derivative perturbs both branches; the analytic one sees
  // only the augmented branch, so the reference must hold the real branch
  // fixed at the unperturbed parameters.
  FeaturePyramid fixed;
  Tape t0;
  fixed = BoundModel(m, t0, false).encode(t0.constant(xr));
  auto f = [&](Tape& t, std::span<const Var> v) {
    BoundModel bm(m, std::vector<Var>(v.begin(), v.end()));
    FeaturePyramid real;
    for (const auto& p : fixed.pooled) real.pooled.push_back(t.constant(p.value()));
    return fcl_loss(real, bm.encode(t.constant(xa))).loss;
  };
  const auto r = check_gradients(f, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_input;
}
