#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmseg/error.hpp"

// Finite-value guards on op outputs. On by default in debug builds.
#ifndef MMSEG_CHECK_FINITE
#ifdef NDEBUG
#define MMSEG_CHECK_FINITE 0
#else
#define MMSEG_CHECK_FINITE 1
#endif
#endif

namespace mmseg {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

inline thread_local bool grad_enabled = true;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Receives d(loss)/d(this) and accumulates into the parents' grads.
  std::function<void(std::span<const T>)> backward_fn;
};

}  // namespace detail

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

inline bool grad_enabled() noexcept { return detail::grad_enabled; }

/// Dense row-major array with an optional gradient slot.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values are
/// treated as immutable once an op has produced them. The only sanctioned
/// in-place writers are the optimizer and checkpoint loading, which touch
/// leaf parameters through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) {
    validate(shape);
    node_ = std::make_shared<detail::TensorNode<T>>();
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) {
    validate(shape);
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_ = std::make_shared<detail::TensorNode<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw DimensionError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
  }

  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<detail::TensorNode<T>>& node() const { return node_; }

  /// Wraps an op result. The backward closure is kept only when recording.
  static Tensor from_op(Shape shape, std::vector<T> values, const std::vector<Tensor>& inputs,
                        std::function<void(std::span<const T>)> backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    bool needs = false;
    if (detail::grad_enabled) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
#if MMSEG_CHECK_FINITE
    bool inputs_finite = true;
    for (const auto& in : inputs) inputs_finite = inputs_finite && all_finite(in.data());
    if (inputs_finite && !all_finite(out.data())) {
      throw NumericError("non-finite value produced from finite inputs, output shape " +
                         shape_str(out.shape()));
    }
#endif
    if (needs) {
      out.node_->requires_grad = true;
      for (const auto& in : inputs) {
        if (in.requires_grad()) out.node_->parents.push_back(in.node_);
      }
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

  /// Gradient accumulator of this tensor, or nullptr when it takes no gradient.
  std::vector<T>* grad_sink() const {
    if (!requires_grad()) return nullptr;
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return &node_->grad;
  }

  static bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  static void validate(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor: rank-0 shapes are not supported");
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor: zero extent in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Reverse-mode sweep from a scalar loss.
///
/// Leaf tensors that require grad accumulate into their grad buffers; interior
/// nodes are released afterwards, so a second call on the same loss fails.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw GraphError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  using Node = detail::TensorNode<T>;
  Node* root = loss.node().get();
  if (root->consumed) throw GraphError("backward: graph already consumed");
  if (!root->requires_grad) {
    root->consumed = true;
    return;
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (root->grad.empty()) root->grad.assign(1, T(0));
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(node->grad);
  }
  for (Node* node : order) {
    if (node->backward_fn || !node->parents.empty()) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
      node->consumed = true;
    }
  }
  root->consumed = true;
}

}  // namespace mmseg
