#include "partvit/autodiff/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "partvit/errors.hpp"

namespace partvit::ad {

namespace {
thread_local bool t_grad_enabled = true;
thread_local bool t_debug_checks = false;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::broadcast: return "broadcast";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::conv2d: return "conv2d";
    case OpKind::embedding: return "embedding";
    case OpKind::l2_normalize: return "l2_normalize";
    case OpKind::custom: return "custom";
  }
  return "unknown";
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool debug_checks() { return t_debug_checks; }
void set_debug_checks(bool enabled) { t_debug_checks = enabled; }

template <typename T>
std::span<T> Node<T>::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  return grad;
}

template <typename T>
void Node<T>::accumulate_grad(std::span<const T> g) {
  auto buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  if (ad::numel(shape) != values.size()) {
    throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(ad::numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = ad::numel(shape);
  return from_vector(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_vector(Shape{1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                                 OpKind kind, BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = kind;
  if (t_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node_);
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::size(int axis) const {
  const int rank = static_cast<int>(dim());
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return node_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return node_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return node_->grad.size() == node_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
OpKind Tensor<T>::op() const {
  return node_->op;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return !node_->backward;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_vector(shape(), node_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from_vector(shape(), node_->data, node_->requires_grad);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() without a seed needs a scalar root, got shape " +
                        to_string(shape()));
  }
  const T one(1);
  backward(std::span<const T>(&one, 1));
}

template <typename T>
void Tensor<T>::backward(std::span<const T> seed) const {
  if (seed.size() != numel()) {
    throw ContractError("seed gradient size " + std::to_string(seed.size()) +
                        " does not match root shape " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS yields a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-sweep scratch; leaves accumulate across sweeps.
  for (auto* node : order) {
    if (node->backward) node->grad.assign(node->data.size(), T(0));
  }
  node_->accumulate_grad(seed);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward) node->backward(*node);
  }
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;

}  // namespace partvit::ad
