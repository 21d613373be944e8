#include "ulsa/selftest.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>

#include "ulsa/error.hpp"
#include "ulsa/gradcheck.hpp"
#include "ulsa/metrics.hpp"
#include "ulsa/model.hpp"
#include "ulsa/objective.hpp"
#include "ulsa/ops.hpp"
#include "ulsa/rng.hpp"
#include "ulsa/stainnorm.hpp"
#include "ulsa/trainer.hpp"

namespace ulsa {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

// Weighted sum with fixed random weights so every output gets its own upstream gradient.
Var weighted_sum(Var y, std::uint64_t seed) {
  Rng r(seed);
  return ops::sum(ops::mul(y, y.tape().constant(random_tensor(y.shape(), r))));
}

struct GradCase {
  std::string name;
  ScalarFn fn;
  std::vector<Tensor> inputs;
};

std::vector<GradCase> op_cases() {
  Rng rng(101);
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, std::function<Var(Var)> op, Tensor x) {
    cases.push_back({std::move(name), [op](Tape&, std::span<const Var> v) { return weighted_sum(op(v[0]), 7); }, {std::move(x)}});
  };
  auto binary = [&](std::string name, std::function<Var(Var, Var)> op, Tensor a, Tensor b) {
    cases.push_back({std::move(name), [op](Tape&, std::span<const Var> v) { return weighted_sum(op(v[0], v[1]), 8); },
                     {std::move(a), std::move(b)}});
  };
  binary("add", ops::add, random_tensor({3, 4}, rng), random_tensor({3, 4}, rng));
  binary("sub", ops::sub, random_tensor({3, 4}, rng), random_tensor({3, 4}, rng));
  binary("mul", ops::mul, random_tensor({3, 4}, rng), random_tensor({3, 4}, rng));
  unary("scale", [](Var x) { return ops::scale(x, -2.5); }, random_tensor({3, 4}, rng));
  unary("relu", ops::relu, random_tensor({3, 4}, rng));
  unary("log", ops::log, random_tensor({3, 4}, rng, 0.2, 2.0));
  unary("mean", [](Var x) { return ops::mean(ops::mul(x, x)); }, random_tensor({3, 4}, rng));
  unary("sum", [](Var x) { return ops::sum(ops::mul(x, x)); }, random_tensor({3, 4}, rng));
  binary("matmul", ops::matmul, random_tensor({3, 5}, rng), random_tensor({5, 2}, rng));
  binary("add_bias", ops::add_bias, random_tensor({3, 2}, rng), random_tensor({2}, rng));
  for (std::size_t stride : {1u, 2u}) {
    binary("conv3x3/s" + std::to_string(stride), [stride](Var x, Var w) { return ops::conv2d(x, w, stride, 1); },
           random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng));
    binary("conv1x1/s" + std::to_string(stride), [stride](Var x, Var w) { return ops::conv2d(x, w, stride, 0); },
           random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 1, 1}, rng));
  }
  unary("max_pool2d", [](Var x) { return ops::max_pool2d(x, 2, 2); }, random_tensor({2, 3, 4, 4}, rng));
  unary("adaptive_avg_pool", ops::adaptive_avg_pool, random_tensor({2, 3, 4, 4}, rng));
  unary("upsample2x", ops::upsample2x, random_tensor({2, 3, 3, 3}, rng));
  binary("concat_channels", ops::concat_channels, random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 2, 4, 4}, rng));
  cases.push_back({"group_norm",
                   [](Tape&, std::span<const Var> v) { return weighted_sum(ops::group_norm(v[0], v[1], v[2], 2), 9); },
                   {random_tensor({2, 4, 3, 3}, rng), random_tensor({4}, rng, 0.5, 1.5), random_tensor({4}, rng)}});
  unary("softmax", ops::softmax, random_tensor({2, 3, 2, 2}, rng, -3, 3));
  unary("log_softmax", ops::log_softmax, random_tensor({2, 3, 2, 2}, rng, -3, 3));
  cases.push_back({"nll_mean",
                   [](Tape&, std::span<const Var> v) {
                     static const std::vector<int> t = {0, 2, 1, 1, 2, 0, 0, 1};
                     return ops::nll_mean(ops::log_softmax(v[0]), t);
                   },
                   {random_tensor({2, 3, 2, 2}, rng, -3, 3)}});
  binary("cosine_similarity", ops::cosine_similarity, random_tensor({3, 5}, rng), random_tensor({3, 5}, rng));
  return cases;
}

EncoderConfig small_encoder() {
  EncoderConfig e;
  e.num_blocks = 2;
  e.base_channels = 4;
  e.norm_groups = 2;
  return e;
}

GradCase model_case(Task task, std::size_t classes, std::uint64_t seed) {
  auto model = std::make_shared<Model>(small_encoder(), TaskHead{task, classes}, seed);
  Rng rng(seed);
  std::vector<Tensor> inputs = {random_tensor({2, 3, 16, 16}, rng)};
  for (const auto& p : model->params()) inputs.push_back(p.tensor);
  auto targets = std::make_shared<std::vector<int>>(task == Task::segmentation ? 2 * 16 * 16 : 2);
  for (auto& t : *targets) t = static_cast<int>(rng.index(classes));
  return {std::string("model/") + std::string(to_string(task)),
          [model, targets, task](Tape&, std::span<const Var> v) {
            BoundModel bm(*model, std::vector<Var>(v.begin() + 1, v.end()));
            return supervised_loss(bm.predict(v[0]), *targets, task);
          },
          inputs};
}

// The numerical derivative would also perturb the real branch, which the
// analytic gradient ignores by design, so the real pyramid is fixed at the
// unperturbed parameters.
GradCase fcl_case(FclBlocks blocks, std::uint64_t seed) {
  auto model = std::make_shared<Model>(small_encoder(), TaskHead{Task::segmentation, 3}, seed);
  Rng rng(seed);
  const Tensor xr = random_tensor({2, 3, 16, 16}, rng);
  auto xa = std::make_shared<Tensor>(random_tensor({2, 3, 16, 16}, rng));
  auto fixed = std::make_shared<std::vector<Tensor>>();
  {
    Tape t;
    for (const auto& p : BoundModel(*model, t, false).encode(t.constant(xr), true).pooled) fixed->push_back(p.value());
  }
  std::vector<Tensor> inputs;
  for (const auto& p : model->params()) inputs.push_back(p.tensor);
  return {blocks == FclBlocks::all ? "fcl/all-blocks" : "fcl/last-block",
          [model, xa, fixed, blocks](Tape& t, std::span<const Var> v) {
            BoundModel bm(*model, std::vector<Var>(v.begin(), v.end()));
            FeaturePyramid real;
            for (const auto& p : *fixed) real.pooled.push_back(t.constant(p));
            return fcl_loss(real, bm.encode(t.constant(*xa)), blocks).loss;
          },
          inputs};
}

using Vec3 = std::array<double, 3>;

Vec3 unit(Vec3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

double angle_deg(const Vec3& a, const Vec3& b) {
  const double d = std::clamp(a[0] * b[0] + a[1] * b[1] + a[2] * b[2], -1.0, 1.0);
  return std::acos(d) * 180.0 / std::numbers::pi;
}

// Optical-density mixture: 10% pure stain 1, 10% pure stain 2, the rest mixed.
Image mixture(std::size_t n, Rng& rng, const Vec3& h1, const Vec3& h2) {
  Image img(n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double u = rng.uniform();
      double c1 = 0.0, c2 = 0.0;
      if (u < 0.1) {
        c1 = rng.uniform(0.6, 1.5);
      } else if (u < 0.2) {
        c2 = rng.uniform(0.6, 1.5);
      } else {
        c1 = rng.uniform(0.3, 1.2);
        c2 = rng.uniform(0.3, 1.2);
      }
      Rgb px;
      for (int c = 0; c < 3; ++c) px[c] = od_to_intensity(c1 * h1[c] + c2 * h2[c]);
      img.set_pixel(y, x, px);
    }
  return img;
}

StainProfile direct_profile(const Image& img) {
  const Tensor lab = rgb_to_lab(img);
  StainProfile p;
  const double n = static_cast<double>(img.pixel_count());
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < img.pixel_count(); ++i) m += lab[i * 3 + c];
    m /= n;
    for (std::size_t i = 0; i < img.pixel_count(); ++i) v += (lab[i * 3 + c] - m) * (lab[i * 3 + c] - m);
    p.mean[c] = m;
    p.std[c] = std::sqrt(v / n);
  }
  return p;
}

}  // namespace

CheckResult check_gradient_suite() {
  const auto t0 = Clock::now();
  CheckResult r{"gradient suite", true, {}, 0.0};
  std::vector<GradCase> cases = op_cases();
  cases.push_back(model_case(Task::segmentation, 3, 31));
  cases.push_back(model_case(Task::classification, 2, 32));
  cases.push_back(fcl_case(FclBlocks::all, 33));
  cases.push_back(fcl_case(FclBlocks::last_only, 34));
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  for (const auto& c : cases) {
    const GradCheckResult g = check_gradients(c.fn, c.inputs);
    checked += g.checked;
    if (g.max_rel_error > worst) {
      worst = g.max_rel_error;
      worst_name = c.name;
    }
    if (!(g.max_rel_error < 1e-4)) {
      r.passed = false;
      r.detail += c.name + " rel error " + fmt(g.max_rel_error) + "; ";
    }
  }
  r.detail += std::to_string(cases.size()) + " cases, " + std::to_string(checked) + " entries, worst rel error " +
              fmt(worst) + " (" + worst_name + ")";
  r.seconds = since(t0);
  return r;
}

CheckResult check_stop_gradient() {
  const auto t0 = Clock::now();
  CheckResult r{"stop-gradient", true, {}, 0.0};
  double worst = 0.0;
  for (FclBlocks blocks : {FclBlocks::all, FclBlocks::last_only}) {
    const Model m(small_encoder(), {Task::segmentation, 3}, 41);
    Rng rng(41);
    const Tensor xr = random_tensor({2, 3, 16, 16}, rng), xa = random_tensor({2, 3, 16, 16}, rng);
    std::vector<Tensor> g_detached, g_constant;
    {
      Tape t;
      BoundModel bm(m, t);
      t.backward(fcl_loss(bm.encode(t.constant(xr), true), bm.encode(t.constant(xa)), blocks).loss);
      g_detached = bm.gradients();
    }
    std::vector<Tensor> real_values;
    {
      Tape t;
      for (const auto& p : BoundModel(m, t, false).encode(t.constant(xr)).pooled) real_values.push_back(p.value());
    }
    {
      Tape t;
      BoundModel bm(m, t);
      FeaturePyramid real;
      for (const auto& v : real_values) real.pooled.push_back(t.constant(v));
      t.backward(fcl_loss(real, bm.encode(t.constant(xa)), blocks).loss);
      g_constant = bm.gradients();
    }
    for (std::size_t i = 0; i < g_detached.size(); ++i)
      for (std::size_t k = 0; k < g_detached[i].size(); ++k)
        worst = std::max(worst, std::abs(g_detached[i][k] - g_constant[i][k]));
  }
  r.passed = worst == 0.0;
  r.detail = "max abs difference vs constant real branch " + fmt(worst);
  r.seconds = since(t0);
  return r;
}

CheckResult check_reinhard_contract() {
  const auto t0 = Clock::now();
  CheckResult r{"Reinhard contract", true, {}, 0.0};
  Rng rng(51);
  double worst_stat = 0.0, worst_self = 0.0;
  std::size_t used = 0, redrawn = 0;
  while (used < 50) {
    const Image src(random_tensor({24, 24, 3}, rng, 0.3, 0.7)), ref(random_tensor({24, 24, 3}, rng, 0.3, 0.7));
    std::size_t clamped = 0;
    const Image out = reinhard_transfer(src, profile_of(ref), clamped);
    if (clamped > 0) {
      ++redrawn;
      continue;
    }
    ++used;
    const StainProfile got = direct_profile(out), want = profile_of(ref);
    for (int c = 0; c < 3; ++c)
      worst_stat = std::max({worst_stat, std::abs(got.mean[c] - want.mean[c]), std::abs(got.std[c] - want.std[c])});
    const Image self = reinhard_transfer(src, profile_of(src));
    for (std::size_t i = 0; i < self.pixels().size(); ++i)
      worst_self = std::max(worst_self, std::abs(self.pixels()[i] - src.pixels()[i]));
  }
  r.passed = worst_stat < 1e-6 && worst_self < 1e-4;
  r.detail = "stat error " + fmt(worst_stat) + " (limit 1e-6), self-transfer " + fmt(worst_self) +
             " (limit 1e-4), redrawn " + std::to_string(redrawn);
  r.seconds = since(t0);
  return r;
}

CheckResult check_macenko_contract() {
  const auto t0 = Clock::now();
  CheckResult r{"Macenko contract", true, {}, 0.0};
  Rng rng(61);
  double worst_angle = 0.0, worst_trip = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    // Haematoxylin/DAB-like directions with +-5% relative jitter. Every
    // pixel stays above the 0.15 OD threshold and below the largest
    // representable OD (log10 256), so nothing is clamped.
    Vec3 h1{0.65, 0.70, 0.29}, h2{0.27, 0.57, 0.78};
    for (int c = 0; c < 3; ++c) {
      h1[c] *= 1.0 + rng.uniform(-0.05, 0.05);
      h2[c] *= 1.0 + rng.uniform(-0.05, 0.05);
    }
    h1 = unit(h1);
    h2 = unit(h2);
    const Image img = mixture(64, rng, h1, h2);
    const StainMatrix m = macenko_fit(img);
    worst_angle = std::max({worst_angle, angle_deg(m.column(0), h1), angle_deg(m.column(1), h2)});
    const Image back = macenko_transfer(img, m, m);
    for (std::size_t i = 0; i < img.pixels().size(); ++i)
      worst_trip = std::max(worst_trip, std::abs(back.pixels()[i] - img.pixels()[i]));
  }
  const Image tile = mixture(512, rng, unit({0.65, 0.70, 0.29}), unit({0.27, 0.57, 0.78}));
  const Image ref_img = mixture(512, rng, unit({0.60, 0.72, 0.33}), unit({0.30, 0.55, 0.75}));
  const StainProfile ref_profile = profile_of(ref_img);
  const StainMatrix ref_matrix = macenko_fit(ref_img);
  auto best_of = [](int reps, auto&& fn) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
      const auto s = Clock::now();
      fn();
      best = std::min(best, since(s));
    }
    return best;
  };
  const double tr = best_of(3, [&] { (void)reinhard_transfer(tile, ref_profile); });
  const double tm = best_of(3, [&] { (void)macenko_transfer(tile, macenko_fit(tile), ref_matrix); });
  r.passed = worst_angle < 1.0 && worst_trip < 1e-3 && tm > tr;
  r.detail = "worst angle " + fmt(worst_angle) + " deg, round trip " + fmt(worst_trip) + ", 512x512: Reinhard " +
             fmt(1e3 * tr) + " ms, Macenko " + fmt(1e3 * tm) + " ms";
  r.seconds = since(t0);
  return r;
}

CheckResult check_metric_oracles() {
  const auto t0 = Clock::now();
  CheckResult r{"metric oracles", true, {}, 0.0};
  Rng rng(71);
  double dice_err = 0.0, auroc_err = 0.0, complement_err = 0.0;
  bool invariant = true;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t k = 2 + rng.index(3);
    std::vector<int> p(16 * 16), t(16 * 16);
    for (auto& v : p) v = static_cast<int>(rng.index(k));
    for (auto& v : t) v = static_cast<int>(rng.index(k));
    const DiceResult d = dice(p, t, k);
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t np = 0, nt = 0, both = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        np += p[i] == static_cast<int>(c);
        nt += t[i] == static_cast<int>(c);
        both += p[i] == static_cast<int>(c) && t[i] == static_cast<int>(c);
      }
      const double want = np + nt == 0 ? 0.0 : 2.0 * static_cast<double>(both) / static_cast<double>(np + nt);
      dice_err = std::max(dice_err, std::abs(d.per_class[c] - want));
    }

    const std::size_t n = 6 + rng.index(25);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(static_cast<int>(rng.index(129)) - 64) / 64.0;  // dyadic, with ties
      l[i] = static_cast<int>(rng.index(2));
    }
    l[0] = 0;
    l[1] = 1;
    double hit = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (l[i] == 1 && l[j] == 0) {
          hit += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
          pairs += 1.0;
        }
    const double a = auroc(s, l);
    auroc_err = std::max(auroc_err, std::abs(a - hit / pairs));
    std::vector<double> affine(n), squashed(n), negated(n);
    for (std::size_t i = 0; i < n; ++i) {
      affine[i] = 2.0 * s[i] + 1.0;
      squashed[i] = std::tanh(s[i]);
      negated[i] = -s[i];
    }
    invariant &= auroc(affine, l) == a && auroc(squashed, l) == a;
    complement_err = std::max(complement_err, std::abs(a + auroc(negated, l) - 1.0));
  }
  r.passed = dice_err <= 1e-12 && auroc_err <= 1e-12 && invariant && complement_err <= 1e-12;
  r.detail = "dice error " + fmt(dice_err) + ", auroc error " + fmt(auroc_err) + ", monotone invariance " +
             (invariant ? "exact" : "BROKEN") + ", complement error " + fmt(complement_err);
  r.seconds = since(t0);
  return r;
}

CheckResult check_mixture_sampler() {
  const auto t0 = Clock::now();
  CheckResult r{"mixture sampler", true, {}, 0.0};
  const MixtureSampler sampler({{"srcA", 500}, {"srcB", 37}, {"tgtB", 2000}, {"tgtC", 5}});
  Rng rng(81);
  const std::size_t n = 100000;
  std::vector<double> counts(sampler.stain_count(), 0.0);
  for (std::size_t i = 0; i < n; ++i) counts[sampler.draw(rng).stain] += 1.0;
  const double expected = static_cast<double>(n) / static_cast<double>(counts.size());
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  const double p = boost::math::cdf(boost::math::complement(dist, chi2));
  r.passed = p > 0.01;
  r.detail = "chi2 " + fmt(chi2) + ", p " + fmt(p);
  r.seconds = since(t0);
  return r;
}

std::vector<CheckResult> run_selftest() {
  return {check_gradient_suite(), check_stop_gradient(), check_reinhard_contract(),
          check_macenko_contract(), check_metric_oracles(), check_mixture_sampler()};
}

}  // namespace ulsa
