#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ulsa/image.hpp"
#include "ulsa/manifest.hpp"
#include "ulsa/rng.hpp"
#include "ulsa/translate.hpp"

namespace ulsa {

/// Class indices of the synthetic kidney-like scenes.
enum SceneClass : std::uint8_t { kBackground = 0, kTubule = 1, kGlomerulus = 2 };
inline constexpr int kSceneClasses = 3;

struct BlobBudget {
  int min_count = 0;
  int max_count = 0;
  double min_radius = 3.0;
  double max_radius = 6.0;
  double density = 0.5;
};

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  /// Elongated ring-shaped structures with a low-density lumen.
  BlobBudget tubules{2, 5, 4.0, 7.0, 0.55};
  /// Round, dense, textured structures.
  BlobBudget glomeruli{0, 2, 6.0, 10.0, 0.9};
  double background_density = 0.05;
  /// Amplitude of the smooth texture noise added to every region.
  double texture = 0.04;
};

struct Scene {
  Tensor density;  ///< (H, W), values in [0, 1]
  Gray8 mask;      ///< class index per pixel
  int glomerulus_count = 0;
  int tubule_count = 0;
};

/// Places disjoint blobs (glomeruli first, then tubules) and builds the
/// density field; structures that fail to fit after a bounded number of
/// placement attempts are dropped.
Scene generate_scene(const SceneSpec& spec, Rng& rng);

/// Classification label of a scene: 1 iff it contains a glomerulus.
inline int scene_label(const Scene& s) { return s.glomerulus_count > 0 ? 1 : 0; }

/// A stain of the synthetic benchmark: its role, rendering and the
/// brightness threshold used to detect tissue under it.
struct StainDefinition {
  std::string name;
  StainRole role = StainRole::source;
  ParametricStain params;
  double tissue_threshold = 0.8;
};

/// The default three-stain benchmark: srcA (source, pink on white),
/// tgtB (target, blue on cream), tgtC (target, brown on gray).
std::vector<StainDefinition> default_stains();
StainSet stain_set_of(const std::vector<StainDefinition>& defs);
std::map<std::string, ParametricStain> stain_params_of(const std::vector<StainDefinition>& defs);

struct TileOptions {
  std::size_t tile = 512;
  std::size_t stride = 512;
  /// A pixel counts as tissue when its mean RGB is below this value.
  double brightness_threshold = 0.8;
  double min_tissue_fraction = 0.1;
};

struct Tile {
  std::size_t y = 0;
  std::size_t x = 0;
  double tissue_fraction = 0.0;
  Image image;
};

/// Grid tiling; a tile is kept iff tissue_fraction >= min_tissue_fraction.
std::vector<Tile> tile_and_filter(const Image& img, const TileOptions& options = {});

enum class Task { segmentation, classification };
std::string_view to_string(Task t);
Task parse_task(std::string_view s);

struct BenchmarkSpec {
  Task task = Task::segmentation;
  std::size_t n_labeled_source = 500;
  std::size_t n_val = 64;
  std::size_t n_test = 100;
  std::size_t n_unlabeled_per_stain = 2000;
  SceneSpec scene;
  std::uint64_t seed = 0;
};

/// Writes a synthetic multi-stain benchmark under out_dir and returns its
/// manifest (also written to out_dir/manifest.jsonl):
///   - labeled source train/val/test scenes (sources used round-robin),
///   - labeled test-only copies of the source test scenes in every target stain,
///   - unlabeled train pools of fresh scenes for every stain.
/// One scene is one patient; file names derive from (seed, scene index).
Manifest make_benchmark(const BenchmarkSpec& spec, const StainSet& stains,
                        const std::map<std::string, ParametricStain>& params, const std::filesystem::path& out_dir);

/// Keeps ceil(fraction * n) of the n real labeled train records, chosen by
/// a seeded permutation so smaller fractions are subsets of larger ones.
/// Synthetic records survive iff the record they derive from survives;
/// everything else is untouched.
Manifest subset_labels(const Manifest& m, double fraction, std::uint64_t seed);

}  // namespace ulsa
