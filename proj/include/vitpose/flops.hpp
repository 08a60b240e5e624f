#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vitpose {

/// Multiply-accumulate counter keyed by layer name. One MAC is one FLOP; only
/// matrix products (linear layers, attention scores/context, convolutions) count.
class FlopCounter {
 public:
  void add(const std::string& layer, std::uint64_t macs);
  void reset();
  std::uint64_t total_macs() const { return total_; }
  const std::map<std::string, std::uint64_t>& per_layer() const { return per_layer_; }
  /// Sum over layers whose name starts with prefix.
  std::uint64_t total_with_prefix(const std::string& prefix) const;
  double gflops() const { return static_cast<double>(total_) * 1e-9; }

  static constexpr const char* kConvention =
      "1 FLOP = 1 multiply-accumulate; counts linear, convolution, deconvolution and attention matrix products";

 private:
  std::uint64_t total_ = 0;
  std::map<std::string, std::uint64_t> per_layer_;
};

/// Routes MACs recorded by ops on this thread into a counter while alive.
class FlopCounterGuard {
 public:
  explicit FlopCounterGuard(FlopCounter& counter);
  ~FlopCounterGuard();
  FlopCounterGuard(const FlopCounterGuard&) = delete;
  FlopCounterGuard& operator=(const FlopCounterGuard&) = delete;

 private:
  FlopCounter* previous_;
};

/// Pushes a layer-name component ("blocks.3", "attn", ...) for the current thread.
class FlopScope {
 public:
  explicit FlopScope(std::string name);
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;
};

/// Records MACs under the current scope path (no-op without an active counter).
void record_macs(std::uint64_t macs, const char* leaf = nullptr);
bool flop_counting_active();
std::string current_flop_scope();

}  // namespace vitpose
