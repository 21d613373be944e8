#include "ulsa/objective.hpp"

#include <string>

#include "ulsa/error.hpp"
#include "ulsa/ops.hpp"

namespace ulsa {

Var supervised_loss(Var logits, std::span<const int> targets, Task task) {
  const Shape& s = logits.shape();
  if (task == Task::classification) {
    if (s.size() != 2 || s[1] != 2) throw ShapeMismatch("classification logits must be (B, 2), got " + shape_str(s));
    for (int t : targets)
      if (t != 0 && t != 1) throw Error("classification label " + std::to_string(t) + " not in {0, 1}");
  } else if (s.size() != 4) {
    throw ShapeMismatch("segmentation logits must be (B, K, H, W), got " + shape_str(s));
  }
  return ops::nll_mean(ops::log_softmax(logits), targets);
}

FclResult fcl_loss(const FeaturePyramid& real, const FeaturePyramid& augmented, FclBlocks blocks) {
  if (real.pooled.size() != augmented.pooled.size() || real.pooled.empty())
    throw ShapeMismatch("feature pyramids differ in length: " + std::to_string(real.pooled.size()) + " vs " +
                        std::to_string(augmented.pooled.size()));
  const std::size_t b = real.pooled.size();
  const std::size_t first = blocks == FclBlocks::last_only ? b - 1 : 0;
  FclResult out;
  Var acc;
  for (std::size_t i = first; i < b; ++i) {
    Var c = ops::mean(ops::cosine_similarity(real.pooled[i], augmented.pooled[i]));
    out.per_block_cosine.push_back(c.value().item());
    acc = acc.valid() ? ops::add(acc, c) : c;
  }
  out.loss = ops::scale(acc, -1.0 / static_cast<double>(b - first));
  return out;
}

TotalLoss total_loss(Var sup, const FclResult* unsup, double weight) {
  if (!(weight >= 0.0)) throw ConfigError("loss_weight must be >= 0, got " + std::to_string(weight));
  TotalLoss out;
  out.report.supervised = sup.value().item();
  if (unsup == nullptr || weight == 0.0) {
    out.loss = sup;
    if (unsup != nullptr) {
      out.report.unsupervised = unsup->loss.value().item();
      out.report.per_block_cosine = unsup->per_block_cosine;
    }
  } else {
    out.loss = ops::add(sup, ops::scale(unsup->loss, weight));
    out.report.unsupervised = unsup->loss.value().item();
    out.report.per_block_cosine = unsup->per_block_cosine;
  }
  out.report.total = out.loss.value().item();
  return out;
}

}  // namespace ulsa
