#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ulsa/config.hpp"
#include "ulsa/metrics.hpp"

namespace ulsa {

/// Short commit hash the library was built from ("unknown" outside git).
std::string build_git_hash();

/// Translator chain for a config: parametric stains or imported files.
TranslatorRegistry make_registry(const RunConfig& c);

/// Train/val data of a manifest for a given labeled fraction. Synthetic
/// target pools are always filled, so one bundle serves every method.
DatasetBundle load_training_data(const RunConfig& c, const Manifest& m, double label_fraction);

struct RunRecord {
  std::filesystem::path dir;
  std::uint64_t seed = 0;
  /// false when an identical finished run was found and reused.
  bool trained = true;
};

/// Trains c.runs runs (seeds c.seed + i) into out/run_<i>, each holding
/// history.csv, best.ckpt, final.ckpt and run.json. A run directory whose
/// run.json already records the same config and seed is reused as is.
std::vector<RunRecord> train_runs(const RunConfig& c, const DatasetBundle& data, const std::filesystem::path& out);

/// run_<i>/best.ckpt under `dir`, in run order.
std::vector<std::filesystem::path> find_checkpoints(const std::filesystem::path& dir);

/// Evaluates each checkpoint on the manifest's test records (run i =
/// checkpoint i). With a non-empty out dir writes report.csv, report.txt
/// and per_sample.csv.
EvalReport evaluate_checkpoints(const RunConfig& c, const Manifest& m,
                                const std::vector<std::filesystem::path>& checkpoints,
                                const std::filesystem::path& out = {}, const std::string& title = "model");

struct SweepPoint {
  double fraction = 1.0;
  std::size_t labeled = 0;
  EvalReport report;
};

/// Trains and evaluates c.method at each label fraction under
/// out/frac_<f>; writes sweep.csv and sweep.svg.
std::vector<SweepPoint> sweep_labels(const RunConfig& c, const Manifest& m, const std::vector<double>& fractions,
                                     const std::filesystem::path& out);

struct AblationRow {
  Method method = Method::ulsa;
  EvalReport report;
};

/// The ablation variants: ulsa, no_cgan, no_fcl, lb_fcl.
std::vector<Method> ablation_methods();

/// Trains and evaluates every ablation variant under out/<variant>;
/// writes ablation.csv and ablation.svg.
std::vector<AblationRow> ablate(const RunConfig& c, const Manifest& m, const std::filesystem::path& out);

/// Subdirectory name of a sweep point, e.g. frac_0.25.
std::string fraction_dir(double f);

}  // namespace ulsa
