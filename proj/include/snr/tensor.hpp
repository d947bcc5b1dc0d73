#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "snr/error.hpp"

namespace snr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tape;

template <typename T>
class Tensor;

namespace detail {

// One vertex of the autodiff graph. `backward` reads `grad` and accumulates
// into the parents it captured.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  Tape<T>* tape = nullptr;
  std::size_t id = static_cast<std::size_t>(-1);
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

}  // namespace detail

/// Dense row-major tensor handle. Values are immutable once produced; a
/// tensor created by a primitive whose inputs require gradients is recorded
/// on the inputs' tape and receives a gradient on `Tape::backward`.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, {v}); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const& { return node_->value; }
  // Copy out of a temporary so range-for over `f(x).values()` stays valid.
  std::vector<T> values() const&& { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }

  T item() const {
    if (size() != 1) throw ContractError("item(): tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }

  /// Gradient after backward; all zeros when the loss did not depend on it.
  std::vector<T> grad() const {
    if (!node_->grad.empty()) return node_->grad;
    return std::vector<T>(size(), T(0));
  }

  std::size_t node_id() const noexcept { return node_ ? node_->id : static_cast<std::size_t>(-1); }
  Tape<T>* tape() const noexcept { return node_ ? node_->tape : nullptr; }

  /// Fresh constant copy, detached from any tape.
  Tensor detach() const { return Tensor(shape(), values()); }

  const detail::NodePtr<T>& node() const { return node_; }

 private:
  detail::NodePtr<T> node_;
};

/// Ordered record of primitive applications. Node ids are assigned in
/// creation order, which is a topological order, so backward walks the
/// record once in reverse. A tape is single-owner and must outlive every
/// tensor recorded on it that is still used for backward.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that requires a gradient.
  Tensor<T> variable(Shape shape, std::vector<T> values) {
    Tensor<T> t(std::move(shape), std::move(values));
    adopt(t.node(), true);
    return t;
  }

  Tensor<T> variable(const Tensor<T>& value) { return variable(value.shape(), value.values()); }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Populates the gradient of every requires-grad tensor reachable from
  /// `loss`. Gradients of nodes with several consumers are summed. Previous
  /// gradients on this tape are discarded first.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward: loss must be a scalar tensor");
    }
    if (loss.tape() != this || !loss.requires_grad()) {
      throw ContractError("backward: loss is not connected to this tape");
    }
    for (auto& n : nodes_) n->grad.clear();
    loss.node()->grad_buffer()[0] = T(1);
    for (std::size_t i = loss.node_id() + 1; i-- > 0;) {
      auto& n = *nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(n);
    }
  }

  /// Records a primitive result. Used by the op layer.
  Tensor<T> record(Shape shape, std::vector<T> values, std::function<void(detail::Node<T>&)> backward) {
    Tensor<T> t(std::move(shape), std::move(values));
    t.node()->backward = std::move(backward);
    adopt(t.node(), true);
    return t;
  }

 private:
  void adopt(const detail::NodePtr<T>& node, bool requires_grad) {
    node->tape = this;
    node->id = nodes_.size();
    node->requires_grad = requires_grad;
    nodes_.push_back(node);
  }

  std::vector<detail::NodePtr<T>> nodes_;
};

}  // namespace snr
