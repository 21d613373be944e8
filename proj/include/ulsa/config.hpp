#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "ulsa/datagen.hpp"
#include "ulsa/model.hpp"
#include "ulsa/trainer.hpp"

namespace ulsa {

struct DataConfig {
  Task task = Task::segmentation;
  std::size_t image_size = 64;
  /// Benchmark manifest used by train/evaluate/sweeps (relative paths
  /// resolve against the config file's directory).
  std::filesystem::path manifest;
  /// "parametric" renders target pools from the stain definitions;
  /// "files" reads <translations_dir>/<src>_to_<dst>/<stem>.png.
  std::string translator = "parametric";
  std::filesystem::path translations_dir;
  std::size_t n_labeled_source = 500;
  std::size_t n_val = 64;
  std::size_t n_test = 100;
  std::size_t n_unlabeled_per_stain = 2000;
  std::uint64_t generate_seed = 0;
  std::uint64_t subset_seed = 0;
};

/// Everything one invocation needs, read from an INI file:
///   [run] [train] [model] [data] and one [stain.<name>] section per stain.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t runs = 3;
  Method method = Method::ulsa;
  TrainConfig train;
  EncoderConfig model;
  DataConfig data;
  std::vector<StainDefinition> stains = default_stains();

  /// Throws ConfigError on inconsistent values.
  void validate() const;
  /// train with the method's switches applied and the given seed.
  TrainConfig resolved_train(std::uint64_t run_seed) const;
  BenchmarkSpec benchmark_spec() const;
  StainSet stain_set() const { return stain_set_of(stains); }
};

/// Parses INI text. Unknown sections or keys and malformed values throw
/// ConfigError naming the offending key. `base_dir` anchors relative paths.
RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

/// Resolved config as INI text; parse_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Every accepted key with its default and meaning.
std::string config_help();

}  // namespace ulsa
