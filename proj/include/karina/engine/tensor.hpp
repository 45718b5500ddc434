#pragma once

// Dense n-dimensional tensor with optional reverse-mode gradient recording.
//
// A Tensor is a cheap handle onto a shared node. Nodes produced by ops while
// recording is enabled keep their inputs and a backward closure; backward()
// walks that record once, in reverse topological order, and then releases it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace karina {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string op, std::size_t index)
      : std::runtime_error("non-finite value produced by op '" + op + "' at flat index " +
                           std::to_string(index)),
        op_(std::move(op)),
        index_(index) {}
  const std::string& op() const noexcept { return op_; }
  std::size_t index() const noexcept { return index_; }

 private:
  std::string op_;
  std::size_t index_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool g_recording = true;
inline thread_local bool g_check_finite = true;
}  // namespace detail

inline bool recording() { return detail::g_recording; }

/// Disables gradient recording on the current thread for its lifetime.
/// Ops executed under it allocate no gradient state.
class NoRecord {
 public:
  NoRecord() : prev_(detail::g_recording) { detail::g_recording = false; }
  ~NoRecord() { detail::g_recording = prev_; }
  NoRecord(const NoRecord&) = delete;
  NoRecord& operator=(const NoRecord&) = delete;

 private:
  bool prev_;
};

/// Toggles the per-op finiteness check on the current thread (on by default).
class FiniteCheck {
 public:
  explicit FiniteCheck(bool enabled) : prev_(detail::g_check_finite) {
    detail::g_check_finite = enabled;
  }
  ~FiniteCheck() { detail::g_check_finite = prev_; }
  FiniteCheck(const FiniteCheck&) = delete;
  FiniteCheck& operator=(const FiniteCheck&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value->size()) grad.assign(value->size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
    node_->value = std::make_shared<std::vector<T>>(karina::numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
    if (karina::numel(shape) != values.size())
      throw ShapeError("tensor shape " + to_string(shape) + " needs " +
                       std::to_string(karina::numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    node_->value = std::make_shared<std::vector<T>>(std::move(values));
    node_->shape = std::move(shape);
  }

  /// Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value->size(); }
  const char* op() const { return node_->op; }
  bool is_leaf() const { return node_->leaf; }

  std::span<const T> data() const { return {node_->value->data(), node_->value->size()}; }

  /// Writable storage. Only leaves may be mutated; recorded results are values.
  std::span<T> mutable_data() {
    if (!node_->leaf) throw GraphError("mutable_data() on non-leaf tensor produced by '" +
                                       std::string(node_->op) + "'");
    return {node_->value->data(), node_->value->size()};
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return (*node_->value)[0];
  }

  T operator[](std::size_t i) const { return (*node_->value)[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->leaf) throw GraphError("set_requires_grad() on non-leaf tensor");
    node_->requires_grad = on;
  }

  bool has_grad() const { return node_->grad.size() == node_->value->size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw GraphError("tensor has no gradient");
    return {node_->grad.data(), node_->grad.size()};
  }
  std::span<T> mutable_grad() { return {node_->ensure_grad().data(), node_->grad.size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// New leaf over a copy of the values.
  Tensor clone() const {
    Tensor t(shape(), *node_->value);
    return t;
  }

  /// New leaf sharing this tensor's value buffer but with its own gradient slot.
  /// Lets concurrent recordings read one parameter without sharing grads.
  Tensor replica() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  /// Leaf view of the values, cut from any recording.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  /// Reverse-mode pass from a scalar loss. Leaf gradients accumulate;
  /// intermediate state is released, so a second call on the same record throws.
  void backward() {
    if (numel() != 1)
      throw GraphError("backward() needs a scalar loss, got shape " + to_string(shape()));
    if (node_->consumed)
      throw GraphError("backward() called twice on the same recording; rebuild the loss");
    if (!node_->requires_grad)
      throw GraphError("backward() on a loss that was not produced under recording");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (n->consumed) throw GraphError("recording already consumed by an earlier backward()");
      if (next < n->inputs.size()) {
        Node* child = n->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (!n->leaf && n->backward) n->backward(*n);
    }
    for (Node* n : order) {
      if (n->leaf) continue;
      n->consumed = true;
      n->backward = nullptr;
      n->inputs.clear();
      std::vector<T>().swap(n->grad);
    }
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds an op result. The record (inputs + backward) is kept only when
  /// recording is on and some input needs a gradient.
  static Tensor make_result(Shape shape, std::vector<T> values, const char* op,
                            std::vector<std::shared_ptr<Node>> inputs,
                            std::function<void(Node&)> backward) {
    if (detail::g_check_finite) {
      for (std::size_t i = 0; i < values.size(); ++i)
        if (!std::isfinite(values[i])) throw NonFiniteError(op, i);
    }
    Tensor t(std::move(shape), std::move(values));
    t.node_->leaf = false;
    t.node_->op = op;
    const bool needs =
        recording() && std::any_of(inputs.begin(), inputs.end(),
                                   [](const auto& n) { return n && n->requires_grad; });
    if (needs) {
      t.node_->requires_grad = true;
      t.node_->inputs = std::move(inputs);
      t.node_->backward = std::move(backward);
    }
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

template <class T>
std::vector<T> to_vector(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace karina
