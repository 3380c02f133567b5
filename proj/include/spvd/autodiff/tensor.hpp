#pragma once

// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// Every operation that has at least one grad-requiring input (and runs while
// gradient recording is enabled) produces a node that keeps its inputs alive
// and stores a backward rule. The graph is released together with the last
// Tensor handle referring to it.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spvd::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that require grad.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled() noexcept;

/// Disables graph recording for the current thread within its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  /// Leaf that participates in differentiation.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  /// Leading extent; 1 for scalars.
  std::size_t rows() const { return rank() == 0 ? 1 : node_->shape[0]; }
  /// Product of trailing extents; equals numel() for rank <= 1.
  std::size_t cols() const { return rank() <= 1 ? numel() : numel() / node_->shape[0]; }

  std::span<const T> data() const { return node_->value; }
  /// Mutable view of a leaf's values (optimizers, finite differences).
  std::span<T> mutable_data();
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  void zero_grad();
  T item() const;
  T at(std::size_t row, std::size_t col) const { return node_->value[row * cols() + col]; }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

/// Wraps a computed value as an op result. Validates that every value is
/// finite and records `backward` when any input requires grad.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs, BackwardFn<T> backward);

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate;
/// interior gradients are recomputed per call.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace spvd::ad
