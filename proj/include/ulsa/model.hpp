#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ulsa/autograd.hpp"
#include "ulsa/checkpoint.hpp"
#include "ulsa/datagen.hpp"
#include "ulsa/image.hpp"

namespace ulsa {

/// Encoder of `num_blocks` residual downsampling blocks; block i (1-based)
/// halves the spatial size and emits base_channels * 2^(i-1) channels.
struct EncoderConfig {
  std::size_t num_blocks = 4;
  std::size_t base_channels = 16;
  /// Group-norm groups; must divide base_channels.
  std::size_t norm_groups = 4;

  std::size_t channels(std::size_t block) const { return base_channels << block; }  // block is 0-based
  void validate() const;
  /// Throws ShapeMismatch unless h and w are divisible by 2^num_blocks.
  void check_input(std::size_t h, std::size_t w) const;
};

struct TaskHead {
  Task kind = Task::segmentation;
  std::size_t num_classes = kSceneClasses;
};

/// Per-block features: maps[i] is block i's output (B, C_i, H_i, W_i),
/// pooled[i] its spatial mean (B, C_i).
struct FeaturePyramid {
  std::vector<Var> pooled;
  std::vector<Var> maps;
};

/// Parameters of the encoder plus one task head.
///
/// Encoder block i (input C_in, output C):
///   h   = relu(gn1(conv3x3_stride2(x)))
///   out = relu(gn2(conv3x3(h)) + conv1x1_stride2(x))
/// Classification head: linear layer on the last block's pooled features.
/// Segmentation head: decoder that repeatedly upsamples (nearest, 2x),
/// concatenates the matching encoder map and applies conv3x3-gn-relu, then a
/// final upsample to input resolution, conv3x3-gn-relu and a 1x1 classifier.
///
/// Parameter count (C_0 = 3, C_i = base * 2^(i-1), K classes):
///   encoder   sum_i 9 C_i C_(i-1) + 9 C_i^2 + C_i C_(i-1) + 4 C_i
///   seg head  sum_(j<b) [9 C_j (C_j + C_(j+1)) + 2 C_j] + 9 C_1^2 + 2 C_1 + K C_1 + K
///   cls head  K C_b + K
class Model {
 public:
  Model(EncoderConfig encoder, TaskHead head, std::uint64_t seed);

  const EncoderConfig& encoder() const { return encoder_; }
  const TaskHead& head() const { return head_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<NamedTensor>& params() { return params_; }
  std::size_t index_of(const std::string& name) const;

  std::size_t parameter_count() const;
  static std::size_t parameter_count(const EncoderConfig& encoder, const TaskHead& head);

  /// Replaces all parameters; names and shapes must match exactly.
  void load(std::span<const NamedTensor> tensors);

 private:
  EncoderConfig encoder_;
  TaskHead head_;
  std::vector<NamedTensor> params_;
};

/// A model's parameters placed on a tape, ready for forward passes.
class BoundModel {
 public:
  /// trainable = false binds every parameter as a constant (inference).
  BoundModel(const Model& model, Tape& tape, bool trainable = true);
  /// Uses caller-provided nodes (aligned with model.params()) as parameters.
  BoundModel(const Model& model, std::vector<Var> params);

  /// With detached = true the pass uses constant copies of the parameters
  /// and returns detached features: nothing downstream reaches the parameters.
  FeaturePyramid encode(Var x, bool detached = false) const;
  /// (B, K) logits.
  Var predict_class(Var x) const;
  /// (B, K, H, W) logits.
  Var predict_mask(Var x) const;
  /// Task-dependent logits.
  Var predict(Var x) const;

  /// Gradients aligned with Model::params(); zeros where nothing flowed.
  std::vector<Tensor> gradients() const;
  Var param(const std::string& name) const;

 private:
  Var p(const std::string& name, bool frozen) const;
  Var conv_gn_relu(Var x, const std::string& prefix, std::size_t stride, bool frozen) const;

  const Model* model_;
  std::vector<Var> live_;
  mutable std::vector<Var> frozen_;
};

/// Stacks same-sized images into a (B, 3, H, W) tensor scaled to [-1, 1].
Tensor images_to_batch(std::span<const Image> images);

}  // namespace ulsa
