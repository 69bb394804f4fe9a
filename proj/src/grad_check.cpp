#include "r2m/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "r2m/rng.hpp"

namespace r2m {

namespace {

double eval_loss(const LossFn& loss, const ParamSet& params) {
  Tape tape(false);
  return loss(tape, params).value().data.at(0);
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= max_coords) return idx;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < max_coords; ++i) {
    std::swap(idx[i], idx[i + rng.index(n - i)]);
  }
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradReport grad_check(const LossFn& loss, const ParamSet& params, double step,
                      const GradCheckOptions& options) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  Tape tape(true);
  Var out = loss(tape, params);
  tape.backward(out);
  const GradMap analytic = tape.param_grads();

  GradReport report;
  ParamSet probe = params;
  std::uint64_t tensor_index = 0;
  for (auto& e : probe.entries()) {
    ++tensor_index;
    if (!e.trainable) continue;
    const auto it = analytic.find(e.name);
    const Tensor zeros(e.value.shape, 0.0);
    const Tensor& grad = it == analytic.end() ? zeros : it->second;

    Rng rng(options.seed, {tensor_index});
    double worst = 0.0;
    bool failed = false;
    for (std::size_t i : pick_coords(e.value.size(), options.max_coords, rng)) {
      const double orig = e.value.data[i];
      e.value.data[i] = orig + step;
      const double up = eval_loss(loss, probe);
      e.value.data[i] = orig - step;
      const double down = eval_loss(loss, probe);
      e.value.data[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        failed = true;
        continue;
      }
      const double numeric = (up - down) / (2.0 * step);
      const double a = grad.data[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
      ++report.coords_checked;
    }
    if (failed) report.failures.push_back(e.name);
    report.per_param[e.name] = worst;
    report.max_error = std::max(report.max_error, worst);
  }
  return report;
}

}  // namespace r2m
