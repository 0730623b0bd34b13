// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a reverse-mode differentiation tape.
//
// Every differentiable operation creates a Node holding its value, the
// nodes it read from and a closure that pushes the node's gradient back
// into those inputs. Nodes carry a global creation sequence number, so
// sorting reachable nodes by descending sequence yields a valid reverse
// topological order for the backward sweep.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "mvnmt/error.hpp"

namespace mvnmt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline std::atomic<std::uint64_t> g_node_sequence{0};
inline thread_local bool t_grad_enabled = true;
}  // namespace detail

/// Disables tape recording for its lifetime (evaluation / decoding).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::t_grad_enabled) { detail::t_grad_enabled = false; }
  ~NoGradGuard() { detail::t_grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::t_grad_enabled; }

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::uint64_t seq = detail::g_node_sequence.fetch_add(1, std::memory_order_relaxed);
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<Real>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

template <typename Real>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Real>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                       std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<Real>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }
  static Tensor scalar(Real v, bool requires_grad = false) {
    return from(Shape{1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Dimension `i`; negative indices count from the back.
  std::size_t dim(int i) const {
    const auto r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) throw ShapeError("dimension index out of range");
    return node_->shape[static_cast<std::size_t>(k)];
  }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }
  /// Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<Real> mutable_data() { return node_->value; }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  std::string_view op() const { return node_->op; }

  Real item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  Real at(std::size_t i) const { return node_->value.at(i); }

  /// Deep copy of the value; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return from(node_->shape, node_->value, requires_grad);
  }

  Node<Real>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds the result of a differentiable op. The backward closure is only
/// attached (and the inputs retained) if some input requires a gradient and
/// recording is enabled.
template <typename Real>
Tensor<Real> make_result(std::string_view op, Shape shape, std::vector<Real> value,
                         std::initializer_list<Tensor<Real>> inputs,
                         std::function<void(Node<Real>&)> backward) {
  auto node = std::make_shared<Node<Real>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<Real>(std::move(node));
}

/// Reverse topological record of the differentiable operations reachable
/// from a root: every node appears before all producers of its inputs.
template <typename Real>
struct Tape {
  std::vector<Node<Real>*> order;

  static Tape record(const Tensor<Real>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<Node<Real>*> seen;
    std::vector<Node<Real>*> stack{root.node()};
    seen.insert(root.node());
    while (!stack.empty()) {
      Node<Real>* n = stack.back();
      stack.pop_back();
      tape.order.push_back(n);
      for (const auto& in : n->inputs) {
        if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
      }
    }
    std::sort(tape.order.begin(), tape.order.end(),
              [](const Node<Real>* a, const Node<Real>* b) { return a->seq > b->seq; });
    return tape;
  }

  std::size_t count(std::string_view op) const {
    return static_cast<std::size_t>(std::count_if(
        order.begin(), order.end(), [&](const Node<Real>* n) { return n->op == op; }));
  }
};

/// Accumulates d loss / d t into every requires_grad ancestor of `loss`.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) return;
  auto tape = Tape<Real>::record(loss);
  loss.node()->grad_buffer()[0] += Real(1);
  for (Node<Real>* n : tape.order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mvnmt
