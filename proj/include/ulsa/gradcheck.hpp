#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ulsa/autograd.hpp"

namespace ulsa {

/// Builds a scalar on `tape` from leaves holding the given inputs.
using ScalarFn = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradCheckResult {
  /// Worst over inputs of |analytic - numeric|_2 / (|analytic|_2 + |numeric|_2).
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst_input;
};

/// Compares reverse-mode gradients against central differences
/// (f(x+h) - f(x-h)) / 2h. At most `max_entries` coordinates per input are
/// probed, spread evenly; zero means all of them.
GradCheckResult check_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                                std::size_t max_entries = 0, const std::vector<std::string>& names = {});

}  // namespace ulsa
