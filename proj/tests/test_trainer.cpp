#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <fstream>

#include "test_util.hpp"
#include "ulsa/error.hpp"
#include "ulsa/stainnorm.hpp"
#include "ulsa/trainer.hpp"

using namespace ulsa;

namespace {

/// In-memory bundle: `n` labeled source scenes in srcA, their renders in
/// the target stains, unlabeled pools and a validation set.
DatasetBundle tiny_bundle(std::size_t n, std::size_t size, std::uint64_t seed, Task task = Task::segmentation) {
  const auto defs = default_stains();
  SceneSpec spec;
  spec.height = spec.width = size;
  spec.glomeruli = {0, 1, 3.0, 5.0, 0.9};
  spec.tubules = {1, 2, 2.0, 4.0, 0.55};
  Rng rng(seed);
  DatasetBundle b;
  b.task = task;
  b.num_classes = task == Task::segmentation ? kSceneClasses : 2;
  auto target_of = [&](const Scene& s) {
    return task == Task::segmentation ? std::vector<int>(s.mask.values.begin(), s.mask.values.end())
                                      : std::vector<int>{scene_label(s)};
  };
  for (const auto& d : defs) (d.role == StainRole::source ? b.source_stains : b.target_stains).push_back(d.name);
  for (std::size_t i = 0; i < n; ++i) {
    const Scene s = generate_scene(spec, rng);
    for (const auto& d : defs)
      b.labeled[d.name].push_back({quantize(render_stain(s.density, d.params)), target_of(s), d.name, "s" + std::to_string(i)});
  }
  for (const auto& d : defs)
    for (std::size_t i = 0; i < 6; ++i) b.unlabeled[d.name].push_back(quantize(render_stain(generate_scene(spec, rng).density, d.params)));
  for (std::size_t i = 0; i < 4; ++i) {
    const Scene s = generate_scene(spec, rng);
    b.val.push_back({quantize(render_stain(s.density, defs[0].params)), target_of(s), defs[0].name, "v"});
  }
  return b;
}

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.num_blocks = 2;
  e.base_channels = 4;
  return e;
}

TrainConfig tiny_config(Method m, std::size_t epochs) {
  TrainConfig c;
  c.batch_labeled = 2;
  c.batch_unlabeled = 2;
  c.batch_total = 4;
  c.lr = 1e-3;
  c.max_epochs = epochs;
  c.seed = 3;
  return apply_method(c, m);
}

}  // namespace

TEST(Method, ParseAndApply) {
  EXPECT_EQ(parse_method("reinhard-norm"), Method::reinhard_norm);
  EXPECT_EQ(to_string(Method::lb_fcl), "lb_fcl");
  EXPECT_THROW(parse_method("cyclegan"), ConfigError);
  const TrainConfig base;
  EXPECT_FALSE(apply_method(base, Method::baseline).uses_fcl());
  EXPECT_FALSE(apply_method(base, Method::baseline).translation_enabled);
  EXPECT_TRUE(apply_method(base, Method::no_fcl).translation_enabled);
  EXPECT_FALSE(apply_method(base, Method::no_cgan).translation_enabled);
  EXPECT_TRUE(apply_method(base, Method::no_cgan).uses_fcl());
  EXPECT_EQ(apply_method(base, Method::lb_fcl).fcl_blocks, FclBlocks::last_only);
}

TEST(TrainConfigCheck, RejectsInconsistentBatches) {
  TrainConfig c;
  c.batch_unlabeled = 95;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.loss_weight = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.blur_kernel_choices = {7};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Sampler, StainsAreUniformRegardlessOfPoolSize) {
  const MixtureSampler s({{"a", 1}, {"b", 10}, {"c", 1000}, {"d", 3}});
  Rng rng(21);
  std::vector<double> counts(4, 0.0);
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n; ++i) counts[s.draw(rng).stain] += 1;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - n / 4.0) * (c - n / 4.0) / (n / 4.0);
  const boost::math::chi_squared dist(3);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01);
  for (double c : counts) EXPECT_NEAR(c / n, 0.25, 0.01);
}

TEST(Sampler, MembersAreUniformWithinPool) {
  const MixtureSampler s({{"a", 5}});
  Rng rng(2);
  std::vector<double> counts(5, 0.0);
  const std::size_t n = 50000;
  for (std::size_t i = 0; i < n; ++i) counts[s.draw(rng).index] += 1;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - n / 5.0) * (c - n / 5.0) / (n / 5.0);
  EXPECT_GT(boost::math::cdf(boost::math::complement(boost::math::chi_squared(4), chi2)), 0.01);
}

TEST(Sampler, EmptyPoolNamesStain) {
  try {
    MixtureSampler({{"a", 3}, {"tgtB", 0}});
    FAIL();
  } catch (const EmptyPool& e) {
    EXPECT_NE(std::string(e.what()).find("tgtB"), std::string::npos);
  }
}

TEST(Sampler, TranslationAddsTargetPools) {
  const DatasetBundle b = tiny_bundle(2, 16, 1);
  EXPECT_EQ(labeled_sampler(b, false).stain_count(), 1u);
  EXPECT_EQ(labeled_sampler(b, true).stain_count(), 3u);
  EXPECT_EQ(unlabeled_sampler(b).stain_count(), 3u);
}

TEST(UnlabeledPair, AugmentedViewTakesReferenceColours) {
  Rng rng(4);
  const DatasetBundle b = tiny_bundle(1, 32, 9);
  const Image x1 = dequantize(b.unlabeled.at("srcA")[0]);
  const Image8* pool[] = {&b.unlabeled.at("tgtB")[0]};
  const auto [real, aug] = make_unlabeled_pair(x1, pool, rng);
  EXPECT_EQ(real.pixels().vec(), x1.pixels().vec());
  EXPECT_EQ(aug.height(), x1.height());
  const StainProfile want = profile_of(dequantize(*pool[0]));
  const StainProfile got = profile_of(aug);
  // The blur is mild and clamping is rare, so the means land close to the reference.
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(got.mean[c], want.mean[c], 0.03) << c;
}

TEST(UnlabeledPair, IdenticalReferenceAndTinyBlurIsNearIdentity) {
  Rng rng(1);
  const DatasetBundle b = tiny_bundle(1, 32, 9);
  const Image8& img = b.unlabeled.at("srcA")[0];
  const Image8* pool[] = {&img};
  const auto [real, aug] = make_unlabeled_pair(dequantize(img), pool, rng, {{3}, 0.01, 0.0100001});
  double worst = 0.0;
  for (std::size_t i = 0; i < real.pixels().size(); ++i)
    worst = std::max(worst, std::abs(real.pixels()[i] - aug.pixels()[i]));
  EXPECT_LT(worst, 0.01);
}

TEST(Train, OverfitsSingleSample) {
  DatasetBundle b = tiny_bundle(1, 16, 5);
  b.labeled.erase("tgtB");
  b.labeled.erase("tgtC");
  b.val = b.labeled.at("srcA");
  TrainConfig c = tiny_config(Method::baseline, 200);
  c.batch_labeled = 1;
  c.batch_unlabeled = 0;
  c.batch_total = 1;
  c.lr = 1e-2;
  c.weight_decay = 0.0;
  c.patience = 1000;
  c.plateau_patience = 1000;
  const TrainResult r = train(c, tiny_encoder(), b);
  EXPECT_EQ(r.epochs_run, 200u);
  EXPECT_LT(r.history[r.history.size() - 2].loss.supervised, 0.01);
  EXPECT_LT(r.best_val_loss, 0.01);
}

TEST(Train, BitIdenticalAcrossRuns) {
  const DatasetBundle b = tiny_bundle(4, 16, 6);
  const TrainConfig c = tiny_config(Method::ulsa, 2);
  const TrainResult a = train(c, tiny_encoder(), b);
  const TrainResult d = train(c, tiny_encoder(), b);
  ASSERT_EQ(a.last.params().size(), d.last.params().size());
  for (std::size_t i = 0; i < a.last.params().size(); ++i)
    EXPECT_EQ(a.last.params()[i].tensor.vec(), d.last.params()[i].tensor.vec()) << a.last.params()[i].name;
  ASSERT_EQ(a.history.size(), d.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].loss.total, d.history[i].loss.total);
}

TEST(Train, ZeroWeightMatchesNoConsistencyRun) {
  // The labeled draws use their own RNG streams, so switching the
  // unlabeled branch off must not change the supervised trajectory.
  const DatasetBundle b = tiny_bundle(4, 16, 7);
  TrainConfig c = tiny_config(Method::ulsa, 2);
  c.loss_weight = 0.0;
  const TrainResult a = train(c, tiny_encoder(), b);
  const TrainResult d = train(tiny_config(Method::no_fcl, 2), tiny_encoder(), b);
  for (std::size_t i = 0; i < a.last.params().size(); ++i)
    EXPECT_EQ(a.last.params()[i].tensor.vec(), d.last.params()[i].tensor.vec());
}

TEST(Train, HistoryAndReportInvariants) {
  const DatasetBundle b = tiny_bundle(4, 16, 8);
  TrainConfig c = tiny_config(Method::ulsa, 2);
  c.loss_weight = 0.5;
  ulsa::testing::TempDir dir("train");
  const TrainResult r = train(c, tiny_encoder(), b, dir.path());
  // 4 labeled source images at batch 2: 2 steps then one validation row per epoch.
  ASSERT_EQ(r.history.size(), 6u);
  for (const auto& h : r.history) {
    if (h.kind == HistoryRow::Kind::val) continue;
    EXPECT_NEAR(h.loss.total, h.loss.supervised + 0.5 * h.loss.unsupervised, 1e-12);
    ASSERT_EQ(h.loss.per_block_cosine.size(), 2u);
    double mean = 0.0;
    for (double cs : h.loss.per_block_cosine) {
      EXPECT_GE(cs, -1.0 - 1e-12);
      EXPECT_LE(cs, 1.0 + 1e-12);
      mean += cs / 2.0;
    }
    EXPECT_NEAR(h.loss.unsupervised, -mean, 1e-12);
  }
  EXPECT_EQ(r.history[2].kind, HistoryRow::Kind::val);
  for (const char* f : {"history.csv", "best.ckpt", "final.ckpt"}) EXPECT_TRUE(std::filesystem::exists(dir.path() / f));
  std::ifstream csv(dir.path() / "history.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "kind,epoch,step,lr,total,supervised,unsupervised,cos_1,cos_2,val_loss");
}

TEST(Train, EarlyStoppingBound) {
  const DatasetBundle b = tiny_bundle(2, 16, 10);
  TrainConfig c = tiny_config(Method::baseline, 40);
  c.lr = 1e-6;
  c.lr_floor = 1e-9;
  c.patience = 2;
  c.plateau_patience = 1;
  const TrainResult r = train(c, tiny_encoder(), b);
  EXPECT_LT(r.epochs_run, 40u);
  EXPECT_LE(r.epochs_run, r.best_epoch + c.patience);
  double lr = 1.0;
  for (const auto& h : r.history) {
    EXPECT_LE(h.lr, lr);
    EXPECT_GE(h.lr, c.lr_floor);
    lr = h.lr;
  }
}

TEST(Train, BestModelHasBestValidationLoss) {
  const DatasetBundle b = tiny_bundle(4, 16, 12);
  const TrainResult r = train(tiny_config(Method::no_cgan, 4), tiny_encoder(), b);
  double best = 1e300;
  for (const auto& h : r.history)
    if (h.kind == HistoryRow::Kind::val) best = std::min(best, h.val_loss);
  EXPECT_DOUBLE_EQ(r.best_val_loss, best);
  EXPECT_NEAR(validation_loss(r.best, b.val, b.task), best, 1e-12);
}

TEST(Train, NormalizationMethodsRun) {
  const DatasetBundle b = tiny_bundle(2, 32, 13);
  const TrainResult r = train(tiny_config(Method::reinhard_norm, 1), tiny_encoder(), b);
  EXPECT_EQ(r.epochs_run, 1u);
  const TrainResult m = train(tiny_config(Method::macenko_norm, 1), tiny_encoder(), b);
  EXPECT_LE(m.normalization_fallbacks, 2u);
}

TEST(Train, ClassificationTask) {
  const DatasetBundle b = tiny_bundle(4, 16, 14, Task::classification);
  const TrainResult r = train(tiny_config(Method::ulsa, 1), tiny_encoder(), b);
  EXPECT_TRUE(std::isfinite(r.best_val_loss));
}

TEST(Train, MissingTargetPoolFails) {
  DatasetBundle b = tiny_bundle(2, 16, 15);
  b.unlabeled.erase("tgtC");
  EXPECT_THROW(train(tiny_config(Method::ulsa, 1), tiny_encoder(), b), EmptyPool);
}
