#include "vitpose/flops.hpp"

namespace vitpose {

namespace {
thread_local FlopCounter* g_counter = nullptr;
thread_local std::vector<std::string> g_scope;
}  // namespace

void FlopCounter::add(const std::string& layer, std::uint64_t macs) {
  per_layer_[layer] += macs;
  total_ += macs;
}

void FlopCounter::reset() {
  per_layer_.clear();
  total_ = 0;
}

std::uint64_t FlopCounter::total_with_prefix(const std::string& prefix) const {
  std::uint64_t s = 0;
  for (const auto& [name, macs] : per_layer_) {
    if (name.compare(0, prefix.size(), prefix) == 0) s += macs;
  }
  return s;
}

FlopCounterGuard::FlopCounterGuard(FlopCounter& counter) : previous_(g_counter) { g_counter = &counter; }
FlopCounterGuard::~FlopCounterGuard() { g_counter = previous_; }

FlopScope::FlopScope(std::string name) { g_scope.push_back(std::move(name)); }
FlopScope::~FlopScope() { g_scope.pop_back(); }

bool flop_counting_active() { return g_counter != nullptr; }

std::string current_flop_scope() {
  std::string s;
  for (const auto& part : g_scope) {
    if (!s.empty()) s += '.';
    s += part;
  }
  return s;
}

void record_macs(std::uint64_t macs, const char* leaf) {
  if (!g_counter) return;
  std::string name = current_flop_scope();
  if (leaf) {
    if (!name.empty()) name += '.';
    name += leaf;
  }
  if (name.empty()) name = "unscoped";
  g_counter->add(name, macs);
}

}  // namespace vitpose
