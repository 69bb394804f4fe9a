#pragma once

#include <map>
#include <string>

#include "r2m/tensor.hpp"

namespace r2m {

/// into += weight * g, adding missing entries.
void accumulate(GradMap& into, const GradMap& g, double weight = 1.0);
double grad_norm(const GradMap& grads);

/// p -= lr * g for every trainable entry that has a gradient.
void sgd_step(ParamSet& params, const GradMap& grads, double lr);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet& params, const GradMap& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  long steps_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace r2m
