#pragma once

// Dense row-major tensors with a dynamically recorded reverse-mode graph.
//
// A Tensor<T> is a shared handle onto a graph node. Ops in ops.hpp create new
// nodes whose parents are the operands; backward() walks the recorded graph in
// reverse topological order exactly once and accumulates gradients into every
// node that requires them. The scalar type is a template parameter: float for
// training, double for finite-difference verification.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mmnet {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline thread_local bool grad_enabled = true;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    check_extents(shape);
    node_->data.assign(mmnet::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    check_extents(shape);
    if (mmnet::numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(mmnet::numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->data = std::move(values);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(1), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, value, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  const char* op_name() const { return node_->op; }

  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
  }

  T& operator[](std::size_t flat) { return node_->data[flat]; }
  const T& operator[](std::size_t flat) const { return node_->data[flat]; }

  template <class... Idx>
  T& at(Idx... idx) {
    return node_->data[offset({static_cast<std::size_t>(idx)...})];
  }
  template <class... Idx>
  const T& at(Idx... idx) const {
    return node_->data[offset({static_cast<std::size_t>(idx)...})];
  }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

  const NodePtr& node() const { return node_; }

  /// Reverse-mode sweep from this scalar root. Leaf gradients accumulate.
  void backward() const;

 private:
  static void check_extents(const Shape& shape) {
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor: extents must be positive, got " + shape_str(shape));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    const auto& s = node_->shape;
    if (idx.size() != s.size()) throw ShapeError("at(): rank mismatch for " + shape_str(s));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i >= s[axis]) throw std::out_of_range("at(): index out of range for " + shape_str(s));
      off = off * s[axis] + i;
      ++axis;
    }
    return off;
  }

  NodePtr node_;
};

template <class T>
void Tensor<T>::backward() const {
  if (!node_) throw std::logic_error("backward() on an undefined tensor");
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar root, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) throw std::logic_error("backward() root does not require grad");

  // Iterative post-order DFS gives a topological order (parents before children).
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are scratch; only leaves keep theirs.
  for (NodeT* n : order) {
    if (n->backward) n->grad.clear();
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

namespace detail {

#ifndef NDEBUG
template <class T>
void debug_check_finite(const Node<T>& n) {
  for (T v : n.data) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite output from op ") + n.op);
  }
}
#else
template <class T>
void debug_check_finite(const Node<T>&) {}
#endif

/// Wraps freshly computed values into a node; records the backward closure
/// only when recording is enabled and some operand requires grad.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      const char* op, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  debug_check_finite(*node);
  if (grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

}  // namespace mmnet
