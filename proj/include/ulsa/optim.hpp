#pragma once

#include <vector>

#include "ulsa/checkpoint.hpp"

namespace ulsa {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

/// One AdamW step with decoupled weight decay:
///   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g^2
///   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps) + lr * wd * p
/// State is allocated on first use. A non-finite gradient throws NonFinite
/// naming the parameter and leaves params and state untouched.
void optimizer_step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads, AdamWState& state,
                    const AdamWConfig& cfg);

}  // namespace ulsa
