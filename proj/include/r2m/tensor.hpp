#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace r2m {

/// Dense row-major tensor of 64-bit floats. Most kernels treat it as a
/// rank-2 matrix; a rank-1 tensor of length n behaves as a 1 x n row.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape_, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape_, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor row(std::span<const double> values);
  static Tensor scalar(double v);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool empty() const { return data.empty(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<double> row_span(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data.data() + r * cols(), cols()};
  }

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  /// First `n` rows as a new matrix.
  Tensor head_rows(std::size_t n) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

std::size_t shape_numel(std::span<const std::size_t> shape);
std::string shape_string(std::span<const std::size_t> shape);

/// Ordered collection of named tensors. Iteration order is insertion order,
/// so two ParamSets built by the same code path enumerate identically.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  void add(std::string name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get_mut(const std::string& name);
  const Entry& entry(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const;

  /// Copies every entry whose name starts with `prefix` into this set,
  /// overwriting existing values of the same name.
  void merge_from(const ParamSet& other, const std::string& prefix = "");

  /// FNV-1a over names, shapes and raw bytes of every entry with the prefix.
  std::uint64_t checksum(const std::string& prefix = "") const;

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Gradients keyed by parameter name.
using GradMap = std::map<std::string, Tensor>;

}  // namespace r2m
