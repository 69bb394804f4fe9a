#include "r2m/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace r2m {

void accumulate(GradMap& into, const GradMap& g, double weight) {
  for (const auto& [name, t] : g) {
    auto it = into.find(name);
    if (it == into.end()) {
      Tensor scaled = t;
      for (auto& v : scaled.data) v *= weight;
      into.emplace(name, std::move(scaled));
      continue;
    }
    if (it->second.size() != t.size()) throw std::invalid_argument("accumulate: size mismatch");
    for (std::size_t i = 0; i < t.size(); ++i) it->second.data[i] += weight * t.data[i];
  }
}

double grad_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [_, t] : grads)
    for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

void sgd_step(ParamSet& params, const GradMap& grads, double lr) {
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    auto it = grads.find(e.name);
    if (it == grads.end()) continue;
    for (std::size_t i = 0; i < e.value.size(); ++i) e.value.data[i] -= lr * it->second.data[i];
  }
}

void Adam::step(ParamSet& params, const GradMap& grads) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    auto it = grads.find(e.name);
    if (it == grads.end()) continue;
    auto [mi, fresh] = m_.try_emplace(e.name, Tensor(e.value.shape, 0.0));
    auto& m = mi->second.data;
    auto& v = v_.try_emplace(e.name, Tensor(e.value.shape, 0.0)).first->second.data;
    const auto& g = it->second.data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      e.value.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

}  // namespace r2m
