#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvf/errors.hpp"

namespace cvf {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  // Empty until backward first writes to it.
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
};

// Shared handle to a dense row-major array. Copies alias the same storage;
// ops never mutate their inputs, so a tensor is effectively immutable once
// produced. Parameters are the exception: the optimizer writes through
// mutable_data() between steps.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  // Empty tensor of shape [0].
  Tensor() : node_(std::make_shared<TensorNode<T>>()) { node_->shape = Shape{0}; }

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
    if (cvf::numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    const auto n = cvf::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}));
  }

  static Tensor full(Shape shape, T value) {
    const auto n = cvf::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  // Leaf tensor tracked by the tape.
  static Tensor parameter(Shape shape, std::vector<T> data) {
    Tensor t(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  const Shape& shape() const noexcept { return node_->shape; }
  std::size_t rank() const noexcept { return node_->shape.size(); }
  std::size_t numel() const noexcept { return node_->data.size(); }

  // Extent of axis i; negative i counts from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int a = i < 0 ? i + r : i;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(i) + " out of range for shape " +
                           to_string(shape()));
    }
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const T> data() const noexcept { return node_->data; }
  std::span<T> mutable_data() noexcept { return node_->data; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  bool is_leaf() const noexcept { return node_->is_leaf; }

  Tensor& set_requires_grad(bool on) {
    if (!node_->is_leaf) throw ContractError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return !node_->grad.empty(); }
  std::span<const T> grad() const noexcept { return node_->grad; }
  void zero_grad() noexcept { node_->grad.clear(); }

  // Gradient as a standalone tensor (zeros when absent).
  Tensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return Tensor(shape(), node_->grad);
  }

  // Copy of the values with no tape history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  const std::shared_ptr<TensorNode<T>>& node() const noexcept { return node_; }
  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

}  // namespace cvf
