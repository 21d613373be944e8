#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"
#include "ulsa/config.hpp"
#include "ulsa/error.hpp"

using namespace ulsa;

TEST(Config, DefaultsRoundTrip) {
  const RunConfig c;
  const RunConfig back = parse_config(to_ini(c));
  EXPECT_EQ(to_ini(back), to_ini(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, EditedValuesRoundTrip) {
  RunConfig c;
  c.seed = 17;
  c.runs = 2;
  c.method = Method::lb_fcl;
  c.train.lr = 3.0000000000000001e-4;
  c.train.loss_weight = 0.1 + 0.2;  // not exactly representable in short decimal
  c.train.blur_kernel_choices = {5};
  c.model.base_channels = 8;
  c.model.norm_groups = 2;
  c.data.task = Task::classification;
  c.data.n_unlabeled_per_stain = 123;
  c.stains.pop_back();
  const RunConfig back = parse_config(to_ini(c));
  EXPECT_EQ(back.seed, 17u);
  EXPECT_EQ(back.method, Method::lb_fcl);
  EXPECT_EQ(back.train.loss_weight, c.train.loss_weight);
  EXPECT_EQ(back.train.blur_kernel_choices, c.train.blur_kernel_choices);
  EXPECT_EQ(back.data.task, Task::classification);
  EXPECT_EQ(back.stains.size(), 2u);
  EXPECT_EQ(to_ini(back), to_ini(c));
}

TEST(Config, PartialFileKeepsDefaults) {
  const RunConfig c = parse_config("[train]\nlr = 0.002\n");
  EXPECT_EQ(c.train.lr, 0.002);
  EXPECT_EQ(c.train.max_epochs, RunConfig{}.train.max_epochs);
  EXPECT_EQ(c.stains.size(), default_stains().size());
}

TEST(Config, UnknownKeyOrSectionNamed) {
  try {
    parse_config("[train]\nlearning_rate = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  EXPECT_THROW(parse_config("[optimizer]\nlr = 1\n"), ConfigError);
}

TEST(Config, MalformedValues) {
  EXPECT_THROW(parse_config("[train]\nlr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nmax_epochs = -3\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nmethod = cyclegan\n"), ConfigError);
  EXPECT_THROW(parse_config("[stain.x]\nrole = source\n"), ConfigError);  // dark/light missing
}

TEST(Config, ValidateRejectsInconsistentBatch) {
  RunConfig c;
  c.train.batch_labeled = 10;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, StainSectionsReplaceDefaults) {
  const RunConfig c = parse_config(
      "[stain.s]\nrole = source\ndark = 0.5, 0.2, 0.4\nlight = 0.9, 0.9, 0.9\n"
      "[stain.t]\nrole = target\ndark = 0.2, 0.2, 0.6\nlight = 0.9, 0.9, 0.8\ngamma = 1.2\n");
  ASSERT_EQ(c.stains.size(), 2u);
  const StainSet s = c.stain_set();
  EXPECT_EQ(s.sources().size(), 1u);
  EXPECT_EQ(s.targets().size(), 1u);
}

TEST(Config, RelativePathsResolveAgainstFile) {
  ulsa::testing::TempDir dir("config");
  {
    std::ofstream f(dir.path() / "c.ini");
    f << "[data]\nmanifest = bench/manifest.jsonl\n";
  }
  const RunConfig c = load_config(dir.path() / "c.ini");
  EXPECT_EQ(c.data.manifest, dir.path() / "bench/manifest.jsonl");
  EXPECT_THROW(load_config(dir.path() / "missing.ini"), Error);
}

TEST(Config, HelpListsEveryKey) {
  const std::string help = config_help();
  const std::string ini = to_ini(RunConfig{});
  std::istringstream in(ini);
  std::string line, section;
  std::size_t keys = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line;
      continue;
    }
    if (section.rfind("[stain.", 0) == 0) continue;
    const std::string key = line.substr(0, line.find(' '));
    const std::size_t at = help.find("  " + section + "\n");
    ASSERT_NE(at, std::string::npos) << section;
    EXPECT_NE(help.find("    " + key + " = ", at), std::string::npos) << section << key;
    ++keys;
  }
  EXPECT_GT(keys, 25u);
}

TEST(Config, ResolvedTrainAppliesMethod) {
  RunConfig c;
  c.method = Method::baseline;
  const TrainConfig t = c.resolved_train(42);
  EXPECT_EQ(t.seed, 42u);
  EXPECT_FALSE(t.fcl_enabled);
  EXPECT_FALSE(t.translation_enabled);
}
