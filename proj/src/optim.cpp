#include "ulsa/optim.hpp"

#include <cmath>

#include "ulsa/error.hpp"

namespace ulsa {

void optimizer_step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads, AdamWState& state,
                    const AdamWConfig& cfg) {
  if (grads.size() != params.size())
    throw ShapeMismatch("optimizer_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].tensor.shape())
      throw ShapeMismatch("optimizer_step: gradient of " + params[i].name + " has shape " + shape_str(grads[i].shape()) +
                          ", parameter has " + shape_str(params[i].tensor.shape()));
    for (std::size_t k = 0; k < grads[i].size(); ++k)
      if (!std::isfinite(grads[i][k]))
        throw NonFinite("optimizer_step: non-finite gradient " + std::to_string(grads[i][k]) + " in " + params[i].name +
                        "[" + std::to_string(k) + "] at step " + std::to_string(state.step + 1));
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.shape());
      state.v.emplace_back(p.tensor.shape());
    }
  } else if (state.m.size() != params.size()) {
    throw ShapeMismatch("optimizer_step: optimizer state does not match the parameter list");
  }

  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      p[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps) + cfg.lr * cfg.weight_decay * p[k];
    }
  }
}

}  // namespace ulsa
