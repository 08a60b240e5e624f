#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitpose {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
};

/// Dense row-major real tensor. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->value.size(); }

  std::span<const double> values() const { return impl_->value; }
  std::span<double> mutable_values() { return impl_->value; }
  const double* data() const { return impl_->value.data(); }
  double* data() { return impl_->value.data(); }
  double at(std::size_t flat) const { return impl_->value.at(flat); }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer, allocated as zeros on first access.
  std::span<double> grad() const;
  std::span<const double> grad_view() const { return impl_->grad; }
  void zero_grad() const;

  Tensor clone() const;
  /// Value copy cut off from the tape.
  Tensor detach() const;

  /// In-place overwrite; shapes must match.
  void assign(const Tensor& other);

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  TensorStorage* storage() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorStorage> impl_;
};

/// Records per-op backward closures. Single use: backward() consumes the tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward);
  void backward(const Tensor& loss);
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

/// Makes a tape the active recorder for the current thread.
class TapeGuard {
 public:
  explicit TapeGuard(Tape& tape);
  ~TapeGuard();
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Tape to record on when any input participates in differentiation, else null.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs);

void check_finite(const Tensor& t, const char* op);

}  // namespace vitpose
