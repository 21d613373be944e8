#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ulsa/datagen.hpp"
#include "ulsa/image.hpp"
#include "ulsa/manifest.hpp"
#include "ulsa/model.hpp"
#include "ulsa/objective.hpp"
#include "ulsa/optim.hpp"
#include "ulsa/rng.hpp"
#include "ulsa/translate.hpp"

namespace ulsa {

/// Training variants: the full method, its ablations and the comparison
/// methods that differ only in how labeled images are prepared.
enum class Method { ulsa, baseline, reinhard_norm, macenko_norm, no_cgan, no_fcl, lb_fcl };
std::string_view to_string(Method m);
/// Accepts the config spellings ulsa, baseline, reinhard-norm, macenko-norm,
/// no_cgan, no_fcl, lb_fcl.
Method parse_method(std::string_view s);

struct TrainConfig {
  Method method = Method::ulsa;
  double loss_weight = 1.0;
  /// Desk-scale batch; the 1:3 labeled/unlabeled ratio matches 32/96 at 128.
  std::size_t batch_total = 32;
  std::size_t batch_labeled = 8;
  std::size_t batch_unlabeled = 24;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  /// Lower bound of the reduce-on-plateau schedule.
  double lr_floor = 1e-10;
  /// Epochs without validation improvement before stopping.
  std::size_t patience = 10;
  /// Epochs without improvement before the learning rate drops by 10x.
  std::size_t plateau_patience = 3;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  std::vector<int> blur_kernel_choices{3, 5};
  double blur_sigma_min = 0.01;
  double blur_sigma_max = 0.4;
  FclBlocks fcl_blocks = FclBlocks::all;
  bool translation_enabled = true;
  bool fcl_enabled = true;
  double label_fraction = 1.0;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
  bool uses_fcl() const { return fcl_enabled && loss_weight > 0.0; }
};

/// Sets the switches implied by a method on top of `base`:
/// baseline and the normalization methods train supervised only on real
/// source data, no_cgan drops translation, no_fcl drops the consistency
/// loss, lb_fcl keeps it on the last encoder block only.
TrainConfig apply_method(TrainConfig base, Method m);

struct LabeledSample {
  Image8 image;
  /// Segmentation: H*W class indices; classification: one label.
  std::vector<int> target;
  std::string stain;
  /// File stem of the image (or of the source image it was translated from).
  std::string stem;
};

/// Everything a run trains and validates on, held in memory as 8-bit images.
struct DatasetBundle {
  Task task = Task::segmentation;
  std::size_t num_classes = kSceneClasses;
  std::vector<std::string> source_stains;
  std::vector<std::string> target_stains;
  /// Labeled train pools per stain: real source records and, for targets,
  /// synthetic records translated from them.
  std::map<std::string, std::vector<LabeledSample>> labeled;
  /// Unlabeled train pools per stain (sources and targets).
  std::map<std::string, std::vector<Image8>> unlabeled;
  std::vector<LabeledSample> val;

  std::size_t source_labeled_count() const;
};

struct BundleOptions {
  Task task = Task::segmentation;
  std::size_t num_classes = kSceneClasses;
  std::size_t image_size = 64;
  /// Fill synthetic target pools; records already in the manifest are used
  /// first, missing (source, target) pairs are translated in memory.
  bool translation = true;
  double label_fraction = 1.0;
  std::uint64_t subset_seed = 0;
};

/// Reads the train/val part of a manifest into memory. Images are resized
/// (bilinear) and masks resampled (nearest) to image_size when needed.
/// Throws MissingTranslator when translation is on and a pair is uncovered.
DatasetBundle load_bundle(const Manifest& manifest, const StainSet& stains, const BundleOptions& options,
                          const TranslatorRegistry* registry);

/// Two-stage draw: a stain uniformly over the pools, then a member
/// uniformly within it.
class MixtureSampler {
 public:
  struct Draw {
    std::size_t stain;
    std::size_t index;
  };
  /// Pools as (stain name, size); throws EmptyPool naming an empty stain.
  explicit MixtureSampler(std::vector<std::pair<std::string, std::size_t>> pools);
  Draw draw(Rng& rng) const;
  const std::string& stain(std::size_t i) const { return pools_[i].first; }
  std::size_t stain_count() const { return pools_.size(); }

 private:
  std::vector<std::pair<std::string, std::size_t>> pools_;
};

/// Labeled mixture over S plus, with translation, the synthetic T pools.
MixtureSampler labeled_sampler(const DatasetBundle& data, bool translation);
/// Unlabeled mixture over S and T.
MixtureSampler unlabeled_sampler(const DatasetBundle& data);

struct LabeledBatch {
  std::vector<Image> images;
  std::vector<int> targets;
  std::vector<std::string> stains;
};

LabeledBatch sample_labeled_batch(const MixtureSampler& sampler, const DatasetBundle& data, std::size_t n, Rng& rng);

struct BlurRange {
  std::vector<int> kernels{3, 5};
  double sigma_min = 0.01;
  double sigma_max = 0.4;
};

/// x~ = blur(reinhard(x1, profile(x2))) with x2 drawn uniformly from
/// `target_pool`, the kernel uniformly from `blur.kernels` and sigma
/// uniformly from [sigma_min, sigma_max). Returns (x1, x~).
std::pair<Image, Image> make_unlabeled_pair(const Image& x1, std::span<const Image8* const> target_pool, Rng& rng,
                                            const BlurRange& blur = {});

struct HistoryRow {
  enum class Kind { step, val } kind = Kind::step;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  LossReport loss;
  double val_loss = 0.0;
};

struct TrainResult {
  Model best;
  Model last;
  std::vector<HistoryRow> history;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  /// Labeled images the Macenko comparison method had to leave unnormalized.
  std::size_t normalization_fallbacks = 0;
};

/// Writes the history as CSV: kind,epoch,step,lr,total,supervised,
/// unsupervised,cos_1..cos_b,val_loss (unused cells empty).
void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& history,
                       std::size_t num_blocks);

/// Mean supervised loss of `model` over `samples`.
double validation_loss(const Model& model, std::span<const LabeledSample> samples, Task task);

/// Runs the training loop. With a non-empty out_dir, writes history.csv,
/// best.ckpt and final.ckpt there.
TrainResult train(const TrainConfig& cfg, const EncoderConfig& encoder, const DatasetBundle& data,
                  const std::filesystem::path& out_dir = {});

}  // namespace ulsa
