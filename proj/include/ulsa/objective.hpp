#pragma once

#include <span>
#include <vector>

#include "ulsa/autograd.hpp"
#include "ulsa/datagen.hpp"
#include "ulsa/model.hpp"

namespace ulsa {

struct LossReport {
  double total = 0.0;
  double supervised = 0.0;
  double unsupervised = 0.0;
  /// Mean batch cosine per encoder block used by the consistency loss
  /// (empty when the loss is off).
  std::vector<double> per_block_cosine;
};

/// Mean cross-entropy. Segmentation: logits (B, K, H, W), targets B*H*W
/// class indices. Classification: logits (B, 2), targets in {0, 1}; the
/// two-logit softmax is equivalent to a sigmoid unit on the logit difference.
Var supervised_loss(Var logits, std::span<const int> targets, Task task);

enum class FclBlocks { all, last_only };

struct FclResult {
  Var loss;
  std::vector<double> per_block_cosine;
};

/// -(1/b) * sum over blocks of the batch-mean cosine similarity between
/// pooled features of the real (detached) and augmented pyramids.
/// With last_only, only the deepest block contributes (b = 1).
FclResult fcl_loss(const FeaturePyramid& real, const FeaturePyramid& augmented, FclBlocks blocks = FclBlocks::all);

struct TotalLoss {
  Var loss;
  LossReport report;
};

/// sup + weight * unsup. Without an unsupervised term (or with weight 0)
/// the returned node is `sup` itself. Negative weights throw ConfigError.
TotalLoss total_loss(Var sup, const FclResult* unsup, double weight);

}  // namespace ulsa
