#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Dataset-free verification suites shared by `posegraph selftest` and the
// acceptance binary.

namespace posegraph {

struct CheckResult {
  std::string name;
  bool passed = false;
  /// The quantity compared against the threshold (max error, max value, ...).
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
  double seconds = 0.0;
};

/// Finite-difference checks of every layer type, the detector, and the full
/// spatial network; 5 seeds each, relative error < 1e-4.
CheckResult check_gradients(int seeds = 5);

/// conv2d_fft against conv2d_direct on random cases with kernels from 3 to
/// 65 (some larger than the input), plus both spatial-model routes.
CheckResult check_fft_equivalence(int cases = 20, std::uint64_t seed = 7);

/// Single-bank dense forward against the sliding-window reference on a
/// 64 x 64 image.
CheckResult check_dense_vs_sliding(int seeds = 3);

/// Bypass-mode spatial forward against the unnormalized exact product on
/// 8 x 8 maps with 3 joints.
CheckResult check_oracle_bypass(int seeds = 10);

/// Shoulder unary zeroed at the true location: with a background bias the
/// face marginal still peaks above 10 eps; without it, it does not.
CheckResult check_bias_rescue();

/// detection_rate against a brute-force counter on random mini test sets,
/// plus monotonicity of every curve.
CheckResult check_detection_metric(int sets = 100, std::uint64_t seed = 11);

std::vector<CheckResult> run_selftest();

/// "PASS name measured=... threshold=... (detail) [t s]"
std::string format_check(const CheckResult& result);

}  // namespace posegraph
