#pragma once

#include <cstdint>
#include <vector>

#include "vitpose/tensor.hpp"

namespace vitpose {

/// Counter-based generator: output i is a SplitMix64 finalisation of seed + i * golden.
/// The stream depends only on (seed, counter), so state is two integers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Normal(0, std) resampled until |x| <= 2 std.
  double truncated_normal(double std);
  bool bernoulli(double p) { return uniform() < p; }

  Tensor normal_tensor(const Shape& shape, double std);
  Tensor truncated_normal_tensor(const Shape& shape, double std);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// Independent child stream derived from this one's seed and a label.
  Rng fork(std::uint64_t label) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace vitpose
