#pragma once

#include <span>
#include <utility>
#include <vector>

#include "r2m/tensor.hpp"

namespace r2m {

/// Max-shifted softmax. Throws std::invalid_argument on empty input.
std::vector<double> softmax(std::span<const double> v);
std::vector<double> log_softmax(std::span<const double> v);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and population (divide-by-n) standard deviation.
MeanStd mean_std_pop(std::span<const double> v);

/// Throws std::invalid_argument on length mismatch and std::domain_error when
/// either vector has zero norm.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

double sigmoid(double x);
/// log(sigmoid(x)) without overflow for large |x|.
double log_sigmoid(double x);

/// Entropy in nats; zero-probability entries contribute nothing.
double entropy(std::span<const double> p);

/// C = op(A) * op(B), optionally accumulating into C. Shapes are checked.
void gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b, Tensor& c,
          bool accumulate = false);
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace r2m
