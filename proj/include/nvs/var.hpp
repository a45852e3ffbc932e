#pragma once

// Reverse-mode automatic differentiation over dense Eigen arrays.
//
// A Var is a shared handle to a graph node holding a flat value array plus a
// logical shape (row-major). Operations in ops.hpp record a backward closure
// on their result whenever gradient recording is enabled on the calling
// thread and at least one input requires a gradient. Parameters are leaf Vars
// with requires_grad set; frozen weights are leaves without it.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace nvs {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

namespace detail {
inline thread_local bool grad_recording = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_recording; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct Node {
  using Array = ArrayX<Scalar>;

  Array value;
  Array grad;
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Array&)> backward;

  Array& grad_buffer() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

template <typename Scalar>
class Var {
 public:
  using Array = ArrayX<Scalar>;
  using NodeType = Node<Scalar>;

  Var() = default;
  explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static Var constant(Array value, Shape shape) { return make(std::move(value), std::move(shape), false); }
  static Var parameter(Array value, Shape shape) { return make(std::move(value), std::move(shape), true); }
  static Var zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel(shape);
    return make(Array::Zero(n), std::move(shape), requires_grad);
  }
  static Var scalar(Scalar v) { return constant(Array::Constant(1, v), Shape{}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  Index size() const { return node_->value.size(); }

  const Array& value() const { return node_->value; }
  Array& value_mutable() { return node_->value; }
  const Array& grad() const { return node_->grad; }
  Array& grad_mutable() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0); }

  Scalar item() const {
    if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  /// Row-major 2D view: rank-1 tensors are a column, higher ranks fold trailing axes.
  ConstMatrixMap<Scalar> mat() const {
    const auto [rows, cols] = matrix_dims();
    return ConstMatrixMap<Scalar>(node_->value.data(), rows, cols);
  }

  std::pair<Index, Index> matrix_dims() const {
    const auto& s = shape();
    if (s.empty()) return {1, 1};
    if (s.size() == 1) return {s[0], 1};
    return {s[0], size() / s[0]};
  }

  /// Leaf copy of the current value that does not participate in the graph.
  Var detach() const { return constant(node_->value, node_->shape); }

  /// Deep copy, preserving requires_grad; gradients are not copied.
  Var clone() const { return make(node_->value, node_->shape, node_->requires_grad); }

  /// Back-propagates from this scalar, accumulating into every reachable
  /// node that requires a gradient. The recorded graph is released afterwards.
  void backward() const;

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  static Var make(Array value, Shape shape, bool requires_grad) {
    if (numel(shape) != value.size()) {
      throw std::invalid_argument("value size " + std::to_string(value.size()) + " does not match shape " +
                                  shape_string(shape));
    }
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  std::shared_ptr<NodeType> node_;
};

template <typename Scalar>
void Var<Scalar>::backward() const {
  if (size() != 1) throw std::invalid_argument("backward() requires a scalar, got " + shape_string(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS yields a topological order of the recorded graph.
  std::vector<NodeType*> order;
  std::unordered_set<NodeType*> visited;
  std::vector<std::pair<NodeType*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeType* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer().setOnes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType* node = *it;
    if (node->backward && node->grad.size() == node->value.size()) node->backward(node->grad);
  }

  // Interior nodes drop their closures and gradients; leaves keep theirs.
  for (NodeType* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
      node->grad.resize(0);
    }
  }
}

}  // namespace nvs
