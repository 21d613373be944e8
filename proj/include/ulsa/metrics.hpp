#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ulsa/datagen.hpp"
#include "ulsa/manifest.hpp"
#include "ulsa/model.hpp"
#include "ulsa/translate.hpp"

namespace ulsa {

struct DiceResult {
  /// 2|P_c & T_c| / (|P_c| + |T_c|); 0 for classes absent from both.
  std::vector<double> per_class;
  /// false for classes absent from both masks (left out of the macro mean).
  std::vector<bool> included;
  double macro = 1.0;
};

/// Per-class and macro Dice of two label maps. Throws ShapeMismatch on
/// size mismatch and Error on labels outside [0, num_classes).
DiceResult dice(std::span<const int> pred, std::span<const int> truth, std::size_t num_classes);

/// Mann-Whitney AUROC: P(score_pos > score_neg) + P(equal) / 2.
/// Throws SingleClass unless both labels occur.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// One evaluated test record of one run.
struct SampleResult {
  std::size_t run = 0;
  std::string image_path;
  std::string stain;
  /// Segmentation: macro Dice; classification: predicted probability of class 1.
  double score = 0.0;
  /// Classification ground truth (unused for segmentation).
  int label = 0;
  std::vector<double> class_dice;
  std::vector<bool> class_included;
};

/// Runs the model on every test record of the listed stains (inference is
/// spread over worker threads; results are in manifest order).
std::vector<SampleResult> predict_samples(const Model& model, const Manifest& manifest, const StainSet& stains,
                                          std::size_t image_size, std::size_t run = 0);

struct StainRow {
  std::string stain;
  StainRole role = StainRole::source;
  std::size_t n = 0;
  double mean = 0.0;
  /// Sample standard deviation over runs (0 for a single run).
  double std = 0.0;
  /// Segmentation only: mean over runs of each class's mean Dice
  /// (averaged over the samples where the class is present).
  std::vector<double> class_mean;
};

struct EvalReport {
  Task task = Task::segmentation;
  std::size_t runs = 0;
  std::vector<StainRow> rows;
  /// Unweighted mean over target stains, then mean/std over runs.
  double overall_mean = 0.0;
  double overall_std = 0.0;
  /// Per-run metric values: per_run[r][k] aligns with rows[k].
  std::vector<std::vector<double>> per_run;
  std::vector<double> overall_per_run;

  double row_mean(const std::string& stain) const;
  double source_mean() const;
};

/// Groups per-sample results by stain and run. Per stain and run the
/// metric is the mean macro Dice (segmentation) or the AUROC
/// (classification); stains with no test records are an error.
EvalReport build_report(const std::vector<SampleResult>& samples, const StainSet& stains, Task task,
                        std::size_t num_classes);

void write_report_csv(const std::filesystem::path& path, const EvalReport& r);
/// Plain-text table grouped into source (intra-stain) and target
/// (inter-stain) columns with an Overall column; values in points (x100).
std::string render_report_table(const EvalReport& r, const std::string& title);
void write_per_sample_csv(const std::filesystem::path& path, const std::vector<SampleResult>& samples);

struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};
/// Minimal SVG line chart (label-fraction sweep).
void write_line_chart_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<ChartSeries>& series);
/// Minimal SVG bar chart (ablation variants).
void write_bar_chart_svg(const std::filesystem::path& path, const std::string& title, const std::string& y_label,
                         const std::vector<std::pair<std::string, double>>& bars);

}  // namespace ulsa
