#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace partvit::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  broadcast,
  reshape,
  permute,
  concat,
  slice,
  sum,
  mean,
  relu,
  gelu,
  sigmoid,
  tanh,
  softmax,
  log_softmax,
  layer_norm,
  conv2d,
  embedding,
  l2_normalize,
  custom,
};

const char* op_name(OpKind kind);

template <typename T>
struct Node;

/// Propagates `self.grad` into the grad buffers of `self.inputs`.
template <typename T>
using BackwardFn = std::function<void(Node<T>& self)>;

/// One vertex of the differentiation graph. Owned through shared_ptr by
/// every Tensor handle and by every consumer node.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  OpKind op = OpKind::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;

  /// Adds `g` into this node's gradient, allocating it on first use.
  void accumulate_grad(std::span<const T> g);
  std::span<T> grad_buffer();
};

/// Reference-semantics handle on a graph node. Copies alias the same data.
///
/// Values are row-major. A Tensor produced by an op is immutable; leaves
/// (parameters, inputs) may be written through mutable_data() between steps.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  /// Builds a non-leaf result. When gradient recording is enabled and any
  /// input requires grad, the node keeps `inputs` and `backward`.
  static Tensor make_result(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                            OpKind kind, BackwardFn<T> backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  /// Extent of `axis`; negative values count from the back.
  std::size_t size(int axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  OpKind op() const;
  bool is_leaf() const;

  /// Copy of the values as a new leaf, disconnected from the graph.
  Tensor detach() const;
  /// Deep copy including requires_grad (but not grad).
  Tensor clone() const;

  /// Reverse-mode sweep from a scalar root (seed 1).
  void backward() const;
  /// Reverse-mode sweep with an explicit seed gradient of this tensor's shape.
  void backward(std::span<const T> seed) const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// True while graph recording is enabled on this thread (default).
bool grad_enabled();

/// Disables graph recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// When enabled, ops validate inputs for NaN and throw NumericError.
bool debug_checks();
void set_debug_checks(bool enabled);

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace partvit::ad
