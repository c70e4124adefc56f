// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle: copying a Tensor aliases the same storage,
// the same way a parameter handle does in most autograd libraries. Use
// clone() for an independent copy. Slices and reshapes always copy; there
// are no strided views.
//
// Recording happens only while a Graph is active on the calling thread
// (see GradScope) and at least one input requires a gradient. Without an
// active graph every op runs in no-grad mode, which is what evaluation uses.
#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedstgcrn/errors.hpp"

namespace fedstgcrn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace detail {

template <std::floating_point T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

}  // namespace detail

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}, std::vector<T>{T(0)}) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode<T>>()) {
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("Tensor: zero extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  std::span<T> mutable_values() { return node_->values; }
  const std::vector<T>& data() const { return node_->values; }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    ensure_grad();
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  // Adds `g` into the gradient slot, allocating it on first use.
  void accumulate_grad(std::span<const T> g) {
    if (g.size() != size()) {
      throw ShapeError("accumulate_grad: gradient of length " + std::to_string(g.size()) +
                       " for tensor of shape " + shape_str(shape()));
    }
    ensure_grad();
    auto& dst = node_->grad;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  // Deep copy of shape and values; the copy carries no gradient.
  Tensor clone() const { return Tensor(shape(), node_->values, requires_grad()); }

  // Deep copy with requires_grad cleared.
  Tensor detach() const { return Tensor(shape(), node_->values, false); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), T(0));
  }

  std::shared_ptr<detail::TensorNode<T>> node_;
};

// Backward rule for one recorded op: receives the gradient of the op's
// output and accumulates into whichever inputs require gradients.
template <std::floating_point T>
using BackwardRule = std::function<void(std::span<const T> out_grad)>;

// Ordered record of executed ops. Backward visits records in exact reverse
// of recording order, which is a valid reverse topological order because an
// op can only consume tensors that already exist.
template <std::floating_point T>
class Graph {
 public:
  struct Record {
    std::string op;
    Tensor<T> output;
    BackwardRule<T> rule;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(std::string op, Tensor<T> output, BackwardRule<T> rule) {
    if (consumed_) throw AutodiffError("Graph::record: graph already consumed by backward; call reset()");
    records_.push_back(Record{std::move(op), std::move(output), std::move(rule)});
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  bool consumed() const { return consumed_; }

  void backward(Tensor<T>& root) {
    if (consumed_) throw AutodiffError("backward: graph was already differentiated; call reset() first");
    if (root.size() != 1) {
      throw AutodiffError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
    }
    auto it = std::find_if(records_.rbegin(), records_.rend(),
                           [&](const Record& r) { return r.output.same_storage(root); });
    if (it == records_.rend()) throw AutodiffError("backward: root was not produced on this graph");

    root.clear_grad();
    const T one = T(1);
    root.accumulate_grad(std::span<const T>(&one, 1));
    for (; it != records_.rend(); ++it) {
      if (!it->output.has_grad()) continue;  // not on a path to the root
      it->rule(it->output.grad());
    }
    consumed_ = true;
  }

  void reset() {
    records_.clear();
    consumed_ = false;
  }

 private:
  std::vector<Record> records_;
  bool consumed_ = false;
};

namespace detail {

template <std::floating_point T>
Graph<T>*& active_graph_slot() {
  thread_local Graph<T>* active = nullptr;
  return active;
}

}  // namespace detail

template <std::floating_point T>
Graph<T>* active_graph() {
  return detail::active_graph_slot<T>();
}

// Makes `graph` the active tape for this thread for the scope's lifetime.
template <std::floating_point T>
class GradScope {
 public:
  explicit GradScope(Graph<T>& graph) : previous_(detail::active_graph_slot<T>()) {
    detail::active_graph_slot<T>() = &graph;
  }
  ~GradScope() { detail::active_graph_slot<T>() = previous_; }
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  Graph<T>* previous_;
};

// Suspends recording for the scope's lifetime.
template <std::floating_point T>
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_graph_slot<T>()) { detail::active_graph_slot<T>() = nullptr; }
  ~NoGradScope() { detail::active_graph_slot<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph<T>* previous_;
};

}  // namespace fedstgcrn
