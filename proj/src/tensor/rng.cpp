#include "vitpose/rng.hpp"

#include <cmath>
#include <numbers>

namespace vitpose {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64(seed_ + counter_ * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return r % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double std) {
  for (;;) {
    const double z = normal();
    if (std::abs(z) <= 2.0) return z * std;
  }
}

Tensor Rng::normal_tensor(const Shape& shape, double std) {
  Tensor t(shape);
  for (double& v : t.mutable_values()) v = normal() * std;
  return t;
}

Tensor Rng::truncated_normal_tensor(const Shape& shape, double std) {
  Tensor t(shape);
  for (double& v : t.mutable_values()) v = truncated_normal(std);
  return t;
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi) {
  Tensor t(shape);
  for (double& v : t.mutable_values()) v = uniform(lo, hi);
  return t;
}

Rng Rng::fork(std::uint64_t label) const { return Rng(splitmix64(seed_ ^ splitmix64(label + kGolden)), 0); }

}  // namespace vitpose
