#pragma once

#include <string>
#include <vector>

namespace ulsa {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Central-difference check of every differentiable op plus a b=2, 16x16
/// model (both heads and the consistency loss with its detached branch);
/// relative error limit 1e-4.
CheckResult check_gradient_suite();
/// Gradients through the detached pyramid are exactly zero.
CheckResult check_stop_gradient();
/// 50 clamp-free random images: transferred lab statistics match the
/// reference within 1e-6; self-transfer within 1e-4.
CheckResult check_reinhard_contract();
/// 50 two-stain mixtures: stain vectors within 1 degree, identity round
/// trip within 1e-3, and 512x512 timings of both normalizers.
CheckResult check_macenko_contract();
/// Dice and AUROC against brute-force oracles on 1000 random instances
/// and exact AUROC invariance under monotone maps.
CheckResult check_metric_oracles();
/// 100k mixture draws over 4 stains pass chi-square uniformity at p > 0.01.
CheckResult check_mixture_sampler();

std::vector<CheckResult> run_selftest();

}  // namespace ulsa
