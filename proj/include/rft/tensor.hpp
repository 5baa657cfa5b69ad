#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rft/errors.hpp"

namespace rft {

// Dimension list of a dense row-major tensor. Rank is at most 4 in practice
// (batch, channel, height, width) but nothing here depends on that.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) : dims_(dims) {}
  explicit Shape(std::vector<int> dims) : dims_(std::move(dims)) {}

  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  const std::vector<int>& dims() const { return dims_; }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : dims_) n *= d;
    return n;
  }

  bool operator==(const Shape& other) const { return dims_ == other.dims_; }
  bool operator!=(const Shape& other) const { return dims_ != other.dims_; }

  std::string str() const {
    std::string s = "[";
    for (size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int> dims_;
};

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense float32 tensor. Tensors created with requires_grad (or produced by an
// operation on such tensors) accumulate gradients during Tape::backward.
// Storage is shared between views, so copies of the handle are cheap.
class Tensor {
 public:
  static TensorPtr zeros(Shape shape, bool requires_grad = false);
  static TensorPtr full(Shape shape, float value, bool requires_grad = false);
  static TensorPtr from_data(Shape shape, std::vector<float> values,
                             bool requires_grad = false);
  static TensorPtr from_scalar(float value);

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }

  std::span<float> data() { return {storage_->data(), storage_->size()}; }
  std::span<const float> data() const {
    return {storage_->data(), storage_->size()};
  }

  // Value of a one-element tensor.
  float item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool value) {
    requires_grad_ = value;
    if (value) needs_grad_ = true;
  }

  // True when a backward pass has to propagate through this tensor, either
  // because it is a leaf with requires_grad or an operation result derived
  // from one.
  bool needs_grad() const { return needs_grad_; }
  void mark_needs_grad() { needs_grad_ = true; }

  bool has_grad() const { return grad_ != nullptr; }

  // Gradient buffer, allocated zero-filled on first access.
  std::span<float> grad();
  std::span<const float> grad() const;

  void zero_grad();

  // Handle sharing this tensor's storage but detached from differentiation.
  TensorPtr detached() const;

  // View with a different shape over the same storage (equal element count).
  TensorPtr reshaped_view(Shape shape) const;

  // Deep copy of the values (gradient state is not copied).
  TensorPtr clone() const;

 private:
  Tensor() = default;

  Shape shape_;
  std::shared_ptr<std::vector<float>> storage_;
  std::shared_ptr<std::vector<float>> grad_;
  bool requires_grad_ = false;
  bool needs_grad_ = false;
};

}  // namespace rft
