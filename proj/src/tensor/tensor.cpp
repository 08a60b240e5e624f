#include "vitpose/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vitpose {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) : impl_(std::make_shared<TensorStorage>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  impl_->value.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) : impl_(std::make_shared<TensorStorage>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->value = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->value, impl_->requires_grad);
  return t;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->value, false); }

void Tensor::assign(const Tensor& other) {
  if (other.shape() != shape()) {
    throw DimensionError("assign: shape " + shape_str(other.shape()) + " into " + shape_str(shape()));
  }
  impl_->value = other.impl_->value;
}

// ---- tape -----------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Tape::record(std::function<void()> backward) {
  if (consumed_) throw std::logic_error("tape already consumed by a backward pass");
  entries_.push_back(std::move(backward));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("tape already consumed by a backward pass");
  if (loss.numel() != 1) throw DimensionError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  consumed_ = true;
  if (!loss.requires_grad()) {
    entries_.clear();
    return;
  }
  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

TapeGuard::TapeGuard(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeGuard::~TapeGuard() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return g_active_tape;
  }
  return nullptr;
}

void check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
  }
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace vitpose
