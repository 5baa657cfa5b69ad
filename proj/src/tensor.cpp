#include "rft/tensor.hpp"

#include <algorithm>

namespace rft {

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
  auto t = TensorPtr(new Tensor());
  t->shape_ = std::move(shape);
  t->storage_ = std::make_shared<std::vector<float>>(
      static_cast<size_t>(t->shape_.numel()), 0.0f);
  t->requires_grad_ = requires_grad;
  t->needs_grad_ = requires_grad;
  return t;
}

TensorPtr Tensor::full(Shape shape, float value, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::fill(t->storage_->begin(), t->storage_->end(), value);
  return t;
}

TensorPtr Tensor::from_data(Shape shape, std::vector<float> values,
                            bool requires_grad) {
  if (shape.numel() != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape.str());
  }
  auto t = TensorPtr(new Tensor());
  t->shape_ = std::move(shape);
  t->storage_ = std::make_shared<std::vector<float>>(std::move(values));
  t->requires_grad_ = requires_grad;
  t->needs_grad_ = requires_grad;
  return t;
}

TensorPtr Tensor::from_scalar(float value) {
  return from_data(Shape{1}, {value});
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a one-element tensor, got shape " +
                     shape_.str());
  }
  return (*storage_)[0];
}

std::span<float> Tensor::grad() {
  if (!grad_) {
    grad_ = std::make_shared<std::vector<float>>(storage_->size(), 0.0f);
  }
  return {grad_->data(), grad_->size()};
}

std::span<const float> Tensor::grad() const {
  if (!grad_) {
    throw Error("gradient read before any backward pass touched this tensor");
  }
  return {grad_->data(), grad_->size()};
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0f);
}

TensorPtr Tensor::detached() const {
  auto t = TensorPtr(new Tensor());
  t->shape_ = shape_;
  t->storage_ = storage_;
  return t;
}

TensorPtr Tensor::reshaped_view(Shape shape) const {
  if (shape.numel() != numel()) {
    throw ShapeError("cannot view shape " + shape_.str() + " as " +
                     shape.str());
  }
  auto t = TensorPtr(new Tensor());
  t->shape_ = std::move(shape);
  t->storage_ = storage_;
  t->requires_grad_ = requires_grad_;
  t->needs_grad_ = needs_grad_;
  return t;
}

TensorPtr Tensor::clone() const {
  auto t = TensorPtr(new Tensor());
  t->shape_ = shape_;
  t->storage_ = std::make_shared<std::vector<float>>(*storage_);
  return t;
}

}  // namespace rft
