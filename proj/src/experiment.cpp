#include "ulsa/experiment.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <memory>

#include "ulsa/checkpoint.hpp"
#include "ulsa/error.hpp"

#ifndef ULSA_GIT_HASH
#define ULSA_GIT_HASH "unknown"
#endif

namespace ulsa {

namespace fs = std::filesystem;

std::string build_git_hash() { return ULSA_GIT_HASH; }

TranslatorRegistry make_registry(const RunConfig& c) {
  TranslatorRegistry reg;
  if (c.data.translator == "files")
    reg.add(std::make_shared<FileImportTranslator>(c.data.translations_dir));
  else
    reg.add(std::make_shared<ParametricTranslator>(stain_params_of(c.stains)));
  return reg;
}

DatasetBundle load_training_data(const RunConfig& c, const Manifest& m, double label_fraction) {
  BundleOptions o;
  o.task = c.data.task;
  o.num_classes = c.data.task == Task::segmentation ? kSceneClasses : 2;
  o.image_size = c.data.image_size;
  o.translation = true;
  o.label_fraction = label_fraction;
  o.subset_seed = c.data.subset_seed;
  const TranslatorRegistry reg = make_registry(c);
  return load_bundle(m, c.stain_set(), o, &reg);
}

namespace {

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) return {};
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception&) {
    return {};
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
}

}  // namespace

std::vector<RunRecord> train_runs(const RunConfig& c, const DatasetBundle& data, const fs::path& out) {
  std::vector<RunRecord> runs;
  const nlohmann::json config = to_json(c);
  for (std::size_t i = 0; i < c.runs; ++i) {
    RunRecord rec;
    rec.seed = c.seed + i;
    rec.dir = out / ("run_" + std::to_string(i));
    const nlohmann::json prev = read_json(rec.dir / "run.json");
    if (!prev.is_null() && prev.value("config", nlohmann::json{}) == config && prev.value("seed", std::uint64_t{0}) == rec.seed &&
        prev.value("complete", false) && fs::exists(rec.dir / "best.ckpt")) {
      spdlog::info("{}: finished run with the same config found, reusing it", rec.dir.string());
      rec.trained = false;
      runs.push_back(rec);
      continue;
    }
    spdlog::info("training {} run {} of {} (seed {})", to_string(c.method), i + 1, c.runs, rec.seed);
    fs::create_directories(rec.dir);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = train(c.resolved_train(rec.seed), c.model, data, rec.dir);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::json j;
    j["config"] = config;
    j["seed"] = rec.seed;
    j["method"] = std::string(to_string(c.method));
    j["git_hash"] = build_git_hash();
    j["timestamp"] = utc_timestamp();
    j["train_seconds"] = secs;
    j["epochs_run"] = r.epochs_run;
    j["best_epoch"] = r.best_epoch;
    j["best_val_loss"] = r.best_val_loss;
    j["labeled_source_images"] = data.source_labeled_count();
    j["normalization_fallbacks"] = r.normalization_fallbacks;
    j["complete"] = true;
    write_text(rec.dir / "run.json", j.dump(2) + "\n");
    runs.push_back(rec);
  }
  return runs;
}

std::vector<fs::path> find_checkpoints(const fs::path& dir) {
  std::vector<fs::path> out;
  for (std::size_t i = 0;; ++i) {
    const fs::path p = dir / ("run_" + std::to_string(i)) / "best.ckpt";
    if (!fs::exists(p)) break;
    out.push_back(p);
  }
  if (out.empty()) throw IoError("no run_<i>/best.ckpt under " + dir.string());
  return out;
}

EvalReport evaluate_checkpoints(const RunConfig& c, const Manifest& m, const std::vector<fs::path>& checkpoints,
                                const fs::path& out, const std::string& title) {
  const StainSet stains = c.stain_set();
  const std::size_t k = c.data.task == Task::segmentation ? kSceneClasses : 2;
  std::vector<SampleResult> samples;
  for (std::size_t run = 0; run < checkpoints.size(); ++run) {
    Model model(c.model, {c.data.task, k}, 0);
    try {
      model.load(load_checkpoint(checkpoints[run]));
    } catch (const ShapeMismatch& e) {
      throw ConfigError(checkpoints[run].string() + " does not match the configured model: " + e.what());
    }
    auto s = predict_samples(model, m, stains, c.data.image_size, run);
    samples.insert(samples.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  EvalReport rep = build_report(samples, stains, c.data.task, k);
  if (!out.empty()) {
    fs::create_directories(out);
    write_report_csv(out / "report.csv", rep);
    write_text(out / "report.txt", render_report_table(rep, title));
    write_per_sample_csv(out / "per_sample.csv", samples);
  }
  return rep;
}

std::string fraction_dir(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frac_%g", f);
  return buf;
}

namespace {

void summary_header(std::ofstream& f, const RunConfig& c) {
  f << "overall_mean,overall_std,source_mean";
  const StainSet stains = c.stain_set();
  for (const auto& t : stains.all()) f << ',' << t.name;
  f << '\n';
}

void summary_cells(std::ofstream& f, const EvalReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.overall_mean, r.overall_std, r.source_mean());
  f << buf;
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, ",%.17g", row.mean);
    f << buf;
  }
  f << '\n';
}

}  // namespace

std::vector<SweepPoint> sweep_labels(const RunConfig& c, const Manifest& m, const std::vector<double>& fractions,
                                     const fs::path& out) {
  if (fractions.empty()) throw ConfigError("no label fractions given");
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("label fractions must lie in (0, 1]");
  std::vector<SweepPoint> points;
  for (double f : fractions) {
    RunConfig rc = c;
    rc.train.label_fraction = f;
    const DatasetBundle data = load_training_data(rc, m, f);
    const fs::path dir = out / fraction_dir(f);
    train_runs(rc, data, dir);
    SweepPoint p;
    p.fraction = f;
    p.labeled = data.source_labeled_count();
    p.report = evaluate_checkpoints(rc, m, find_checkpoints(dir), dir / "eval", fraction_dir(f));
    points.push_back(std::move(p));
  }
  std::ofstream f(out / "sweep.csv", std::ios::trunc);
  if (!f) throw IoError("cannot write " + (out / "sweep.csv").string());
  f << "fraction,labeled,";
  summary_header(f, c);
  for (const auto& p : points) {
    f << p.fraction << ',' << p.labeled << ',';
    summary_cells(f, p.report);
  }
  ChartSeries target{"target (overall)", {}, {}}, source{"source", {}, {}};
  for (const auto& p : points) {
    target.x.push_back(100.0 * p.fraction);
    target.y.push_back(100.0 * p.report.overall_mean);
    source.x.push_back(100.0 * p.fraction);
    source.y.push_back(100.0 * p.report.source_mean());
  }
  write_line_chart_svg(out / "sweep.svg", std::string(to_string(c.method)) + ": label fraction sweep",
                       "labeled source data (%)", c.data.task == Task::segmentation ? "Dice (%)" : "AUROC (%)",
                       {target, source});
  return points;
}

std::vector<Method> ablation_methods() { return {Method::ulsa, Method::no_cgan, Method::no_fcl, Method::lb_fcl}; }

std::vector<AblationRow> ablate(const RunConfig& c, const Manifest& m, const fs::path& out) {
  const DatasetBundle data = load_training_data(c, m, c.train.label_fraction);
  std::vector<AblationRow> rows;
  for (Method method : ablation_methods()) {
    RunConfig rc = c;
    rc.method = method;
    const fs::path dir = out / std::string(to_string(method));
    train_runs(rc, data, dir);
    rows.push_back({method, evaluate_checkpoints(rc, m, find_checkpoints(dir), dir / "eval", std::string(to_string(method)))});
  }
  std::ofstream f(out / "ablation.csv", std::ios::trunc);
  if (!f) throw IoError("cannot write " + (out / "ablation.csv").string());
  f << "method,";
  summary_header(f, c);
  std::vector<std::pair<std::string, double>> bars;
  for (const auto& r : rows) {
    f << to_string(r.method) << ',';
    summary_cells(f, r.report);
    bars.emplace_back(std::string(to_string(r.method)), 100.0 * r.report.overall_mean);
  }
  write_bar_chart_svg(out / "ablation.svg", "Ablation: target stains (overall)",
                      c.data.task == Task::segmentation ? "Dice (%)" : "AUROC (%)", bars);
  return rows;
}

}  // namespace ulsa
