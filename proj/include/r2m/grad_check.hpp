#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "r2m/autodiff.hpp"

namespace r2m {

struct GradReport {
  /// Max relative error per trainable parameter.
  std::map<std::string, double> per_param;
  double max_error = 0.0;
  /// Parameters whose probes produced a non-finite loss.
  std::vector<std::string> failures;
  std::size_t coords_checked = 0;

  bool passed(double tolerance) const { return failures.empty() && max_error < tolerance; }
};

/// Builds a scalar loss on the tape from parameters bound via Tape::param.
using LossFn = std::function<Var(Tape&, const ParamSet&)>;

struct GradCheckOptions {
  /// Coordinates probed per tensor; larger tensors are subsampled.
  std::size_t max_coords = 64;
  std::uint64_t seed = 0;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-4;
};

/// Compares reverse-mode gradients against central differences
/// (f(p + h e) - f(p - h e)) / 2h for every trainable parameter.
GradReport grad_check(const LossFn& loss, const ParamSet& params, double step,
                      const GradCheckOptions& options = {});

}  // namespace r2m
