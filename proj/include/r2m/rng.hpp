#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace r2m {

/// Seeded random stream. A stream is addressed by a base seed plus a path of
/// integers (e.g. {step, group}), so independent consumers never share state
/// and results do not depend on evaluation order or thread count.
///
/// The engine is std::mt19937_64; distributions are computed here rather than
/// through <random> distributions, whose algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {});
  Rng(std::uint64_t seed, std::span<const std::uint64_t> path);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal (Box-Muller, no cached spare).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Draws an index with probability proportional to `weights`.
  std::size_t categorical(std::span<const double> weights);

 private:
  std::mt19937_64 engine_;
};

}  // namespace r2m
