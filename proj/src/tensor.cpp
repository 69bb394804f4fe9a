#include "r2m/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace r2m {

std::size_t shape_numel(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape_, double fill)
    : shape(std::move(shape_)), data(shape_numel(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> values)
    : shape(std::move(shape_)), data(std::move(values)) {
  if (data.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_string(shape));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, fill);
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

std::size_t Tensor::rows() const {
  if (shape.size() == 2) return shape[0];
  if (shape.size() == 1) return 1;
  if (shape.empty()) return 1;
  throw std::invalid_argument("tensor: rows() on rank " + std::to_string(shape.size()));
}

std::size_t Tensor::cols() const {
  if (shape.size() == 2) return shape[1];
  if (shape.size() == 1) return shape[0];
  if (shape.empty()) return 1;
  throw std::invalid_argument("tensor: cols() on rank " + std::to_string(shape.size()));
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::head_rows(std::size_t n) const {
  if (n > rows()) throw std::invalid_argument("tensor: head_rows beyond row count");
  Tensor out = Tensor::matrix(n, cols());
  std::copy(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n * cols()),
            out.data.begin());
  return out;
}

void ParamSet::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("paramset: duplicate name " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value), trainable});
}

bool ParamSet::contains(const std::string& name) const { return index_.count(name) != 0; }

const ParamSet::Entry& ParamSet::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("paramset: no parameter named " + name);
  return entries_[it->second];
}

const Tensor& ParamSet::get(const std::string& name) const { return entry(name).value; }

Tensor& ParamSet::get_mut(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("paramset: no parameter named " + name);
  return entries_[it->second].value;
}

void ParamSet::set_trainable(const std::string& name, bool trainable) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("paramset: no parameter named " + name);
  entries_[it->second].trainable = trainable;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamSet::merge_from(const ParamSet& other, const std::string& prefix) {
  for (const auto& e : other.entries()) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    if (contains(e.name)) {
      auto& dst = entries_[index_[e.name]];
      dst.value = e.value;
      dst.trainable = e.trainable;
    } else {
      add(e.name, e.value, e.trainable);
    }
  }
}

namespace {
constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv_mix(std::uint64_t& h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}
}  // namespace

std::uint64_t ParamSet::checksum(const std::string& prefix) const {
  std::uint64_t h = kFnvOffset;
  for (const auto& e : entries_) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    fnv_mix(h, e.name.data(), e.name.size());
    for (auto d : e.value.shape) fnv_mix(h, &d, sizeof d);
    fnv_mix(h, e.value.data.data(), e.value.data.size() * sizeof(double));
  }
  return h;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    const auto& x = a.entries_[i];
    const auto& y = b.entries_[i];
    if (x.name != y.name || x.trainable != y.trainable || x.value.shape != y.value.shape) {
      return false;
    }
    if (std::memcmp(x.value.data.data(), y.value.data.data(),
                    x.value.data.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace r2m
