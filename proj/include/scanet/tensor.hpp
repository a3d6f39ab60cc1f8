#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace scanet {

/// Allocator with 64-byte alignment. Vectorised kernels choose their loop
/// peeling from buffer addresses, so a fixed alignment keeps results bitwise
/// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents of a 4-axis array laid out as [batch, channels, height, width].
struct Shape4 {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const { return std::size_t(n) * c * h * w; }
  std::size_t plane() const { return std::size_t(h) * w; }
  std::size_t index(int b, int ch, int y, int x) const {
    return ((std::size_t(b) * c + ch) * h + y) * w + x;
  }
  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
  }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape4 shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Buffer<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Reference-counted dense tensor with reverse-mode gradient recording.
///
/// Copies are shallow: two Tensor objects may share one node. Operations in
/// ops.hpp build a graph of nodes when at least one input requires a gradient
/// and recording is enabled; backward() walks it in reverse topological order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape4 shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->shape = shape;
    node_->value.assign(shape.numel(), fill);
  }

  Tensor(Shape4 shape, const std::vector<T>& values) : Tensor(shape, Buffer<T>(values.begin(), values.end())) {}
  Tensor(Shape4 shape, std::initializer_list<T> values) : Tensor(shape, Buffer<T>(values)) {}

  Tensor(Shape4 shape, Buffer<T> values) : node_(std::make_shared<Node<T>>()) {
    if (values.size() != shape.numel()) {
      throw ShapeError("tensor value count " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    }
    node_->shape = shape;
    node_->value = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape4{}, Buffer<T>{v}); }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape4& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> values() & { return node_->value; }
  std::span<const T> values() const& { return node_->value; }
  // A temporary tensor hands out a copy so range-for over it cannot dangle.
  Buffer<T> values() && { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad_buffer(); }
  std::span<const T> grad() const { return node_->grad_buffer(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return node_->value[0];
  }

  T at(int b, int ch, int y, int x) const { return node_->value[shape().index(b, ch, y, x)]; }
  T& at(int b, int ch, int y, int x) { return node_->value[shape().index(b, ch, y, x)]; }

  void zero_grad() { node_->grad.clear(); }

  /// Value copy with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Seeds this tensor's gradient with ones and propagates to every leaf.
  void backward() const {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    if (!node_->requires_grad) return;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [current, next] = stack.back();
      if (next < current->inputs.size()) {
        Node<T>* child = current->inputs[next++].get();
        if (child != nullptr && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(current);
        stack.pop_back();
      }
    }
    auto& seed = node_->grad_buffer();
    std::fill(seed.begin(), seed.end(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The graph edge is only recorded when recording is on
/// and some input needs a gradient.
template <typename T, typename Backward>
Tensor<T> make_result(Shape4 shape, Buffer<T> value, std::initializer_list<const Tensor<T>*> inputs,
                      Backward&& backward) {
  Tensor<T> out(shape, std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || (in->defined() && in->requires_grad());
  if (!any) return out;
  Node<T>* node = out.node();
  node->requires_grad = true;
  for (const Tensor<T>* in : inputs) node->inputs.push_back(in->node_ptr());
  node->backward = std::forward<Backward>(backward);
  return out;
}

template <typename T>
Tensor<T> make_result_n(Shape4 shape, Buffer<T> value, const std::vector<Tensor<T>>& inputs,
                        std::function<void(Node<T>&)> backward) {
  Tensor<T> out(shape, std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  Node<T>* node = out.node();
  node->requires_grad = true;
  for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
  node->backward = std::move(backward);
  return out;
}

/// Accumulation target for an input's gradient, or nullptr when it needs none.
template <typename T>
T* input_grad(Node<T>& self, std::size_t i) {
  Node<T>* in = self.inputs[i].get();
  if (in == nullptr || !in->requires_grad) return nullptr;
  return in->grad_buffer().data();
}

template <typename T>
const T* input_value(const Node<T>& self, std::size_t i) {
  return self.inputs[i]->value.data();
}

template <typename T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T v) { return v - v == T(0); });
}

}  // namespace scanet
