#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "test_util.hpp"
#include "ulsa/error.hpp"
#include "ulsa/metrics.hpp"

using namespace ulsa;

namespace {

double auroc_pairs(const std::vector<double>& s, const std::vector<int>& l) {
  double hit = 0, n = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        hit += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        n += 1;
      }
  return hit / n;
}

StainSet two_stains() { return StainSet({{"S", StainRole::source}, {"T", StainRole::target}}); }

}  // namespace

TEST(Dice, SmallClosedForm) {
  // Class 1: |P|=2, |T|=1, overlap 1 -> 2/3. Class 0: |P|=2, |T|=3, overlap 2 -> 4/5.
  const std::vector<int> pred{1, 1, 0, 0}, truth{1, 0, 0, 0};
  const DiceResult d = dice(pred, truth, 2);
  EXPECT_NEAR(d.per_class[1], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(d.per_class[0], 0.8, 1e-15);
  EXPECT_NEAR(d.macro, (0.8 + 2.0 / 3.0) / 2.0, 1e-15);
}

TEST(Dice, AbsentClassIsExcluded) {
  const std::vector<int> pred{0, 1, 1}, truth{0, 1, 1};
  const DiceResult d = dice(pred, truth, 3);
  EXPECT_FALSE(d.included[2]);
  EXPECT_DOUBLE_EQ(d.macro, 1.0);
}

TEST(Dice, MatchesSetOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> p(200), t(200);
    for (auto& v : p) v = static_cast<int>(rng.index(3));
    for (auto& v : t) v = static_cast<int>(rng.index(3));
    const DiceResult d = dice(p, t, 3);
    for (int c = 0; c < 3; ++c) {
      std::set<std::size_t> P, T, I;
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == c) P.insert(i);
        if (t[i] == c) T.insert(i);
      }
      std::set_intersection(P.begin(), P.end(), T.begin(), T.end(), std::inserter(I, I.begin()));
      EXPECT_NEAR(d.per_class[c], 2.0 * I.size() / (P.size() + T.size()), 1e-15);
    }
  }
}

TEST(Dice, RejectsBadInput) {
  const std::vector<int> a{0, 1}, b{0}, c{0, 3};
  EXPECT_THROW(dice(a, b, 2), ShapeMismatch);
  EXPECT_THROW(dice(a, c, 2), Error);
}

TEST(Auroc, MatchesPairCountingWithTies) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> s(60);
    std::vector<int> l(60);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = std::round(rng.uniform(0.0, 1.0) * 8) / 8;  // plenty of ties
      l[i] = static_cast<int>(i % 3 == 0);
    }
    EXPECT_NEAR(auroc(s, l), auroc_pairs(s, l), 1e-12);
  }
}

TEST(Auroc, InvariantUnderMonotoneMapsAndComplementary) {
  Rng rng(8);
  std::vector<double> s(50), e(50), neg(50);
  std::vector<int> l(50), flip(50);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform(-2.0, 2.0);
    e[i] = std::exp(3.0 * s[i]);
    neg[i] = -s[i];
    l[i] = rng.uniform(0.0, 1.0) < 0.4;
    flip[i] = 1 - l[i];
  }
  EXPECT_NEAR(auroc(s, l), auroc(e, l), 1e-15);
  EXPECT_NEAR(auroc(s, l) + auroc(neg, l), 1.0, 1e-12);
  EXPECT_NEAR(auroc(s, l) + auroc(s, flip), 1.0, 1e-12);
}

TEST(Auroc, PerfectAndSingleClass) {
  const std::vector<double> s{0.1, 0.2, 0.8, 0.9};
  EXPECT_DOUBLE_EQ(auroc(s, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_THROW(auroc(s, std::vector<int>{1, 1, 1, 1}), SingleClass);
}

TEST(Report, MeansAndSampleStdOverRuns) {
  std::vector<SampleResult> samples;
  // Stain S: runs score 0.5 and 0.7; stain T: runs 0.2 and 0.6.
  const double sv[2] = {0.5, 0.7}, tv[2] = {0.2, 0.6};
  for (std::size_t run = 0; run < 2; ++run)
    for (int i = 0; i < 3; ++i) {
      samples.push_back({run, "s" + std::to_string(i), "S", sv[run], 0, {sv[run]}, {true}});
      samples.push_back({run, "t" + std::to_string(i), "T", tv[run], 0, {tv[run]}, {true}});
    }
  const EvalReport r = build_report(samples, two_stains(), Task::segmentation, 1);
  EXPECT_EQ(r.runs, 2u);
  EXPECT_NEAR(r.row_mean("S"), 0.6, 1e-15);
  EXPECT_NEAR(r.rows[0].std, std::sqrt(0.02), 1e-15);
  EXPECT_NEAR(r.overall_mean, 0.4, 1e-15);
  EXPECT_NEAR(r.overall_std, std::sqrt(0.08), 1e-15);
  EXPECT_EQ(r.rows[1].n, 3u);
}

TEST(Report, SingleRunHasZeroStd) {
  std::vector<SampleResult> samples{{0, "a", "S", 0.9, 0, {0.9}, {true}}, {0, "b", "T", 0.3, 0, {0.3}, {true}}};
  const EvalReport r = build_report(samples, two_stains(), Task::segmentation, 1);
  EXPECT_EQ(r.rows[0].std, 0.0);
  EXPECT_EQ(r.overall_std, 0.0);
}

TEST(Report, MissingStainIsAnError) {
  std::vector<SampleResult> samples{{0, "a", "S", 0.9, 0, {0.9}, {true}}};
  try {
    build_report(samples, two_stains(), Task::segmentation, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("T"), std::string::npos);
  }
}

TEST(Report, ClassificationUsesAuroc) {
  std::vector<SampleResult> samples;
  const double sc[4] = {0.1, 0.4, 0.35, 0.8};
  const int lb[4] = {0, 0, 1, 1};
  for (int i = 0; i < 4; ++i) {
    samples.push_back({0, "s", "S", sc[i], lb[i], {}, {}});
    samples.push_back({0, "t", "T", sc[i], lb[i], {}, {}});
  }
  const EvalReport r = build_report(samples, two_stains(), Task::classification, 2);
  EXPECT_DOUBLE_EQ(r.row_mean("T"), 0.75);
}

TEST(Report, CsvTableAndCharts) {
  ulsa::testing::TempDir dir("report");
  std::vector<SampleResult> samples{{0, "a", "S", 0.9, 0, {0.9}, {true}}, {0, "b", "T", 0.3, 0, {0.3}, {true}}};
  const EvalReport r = build_report(samples, two_stains(), Task::segmentation, 1);
  write_report_csv(dir.path() / "r.csv", r);
  std::ifstream f(dir.path() / "r.csv");
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  EXPECT_EQ(header, "stain,role,n,runs,mean,std,class_0");
  EXPECT_EQ(row.rfind("S,source,1,1,0.9", 0), 0u);
  const std::string table = render_report_table(r, "ULSA");
  EXPECT_NE(table.find("90.0"), std::string::npos);
  EXPECT_NE(table.find("Overall"), std::string::npos);
  write_line_chart_svg(dir.path() / "l.svg", "t", "x", "y", {{"a", {1, 2}, {50, 60}}});
  write_bar_chart_svg(dir.path() / "b.svg", "t", "y", {{"a", 40.0}, {"b", 60.0}});
  EXPECT_GT(std::filesystem::file_size(dir.path() / "l.svg"), 100u);
  EXPECT_GT(std::filesystem::file_size(dir.path() / "b.svg"), 100u);
}
