#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "partvit/autodiff/tensor.hpp"

namespace partvit::ad {

// Differentiable tensor operations. Every op returns a new tensor and, when
// recording is enabled, a backward rule. There is no implicit broadcasting:
// operands of elementwise ops must have identical shapes; use broadcast_to.

/// Matrix product over the last two axes. Leading (batch) axes must match,
/// or one operand may be a plain matrix shared across the other's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);

/// Numpy-style expansion: shapes are aligned at the trailing axis and
/// size-1 (or missing) axes are repeated. Backward sums over expanded axes.
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);
/// Axis permutation; output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1);

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis);
/// Half-open range [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end);

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim = false);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim = false);

template <typename T>
Tensor<T> relu(const Tensor<T>& a);
/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T>
Tensor<T> tanh(const Tensor<T>& a);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis);

/// Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gamma + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6));

/// Cross-correlation. x: [N, C, H, W], w: [F, C, kh, kw] -> [N, F, OH, OW].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                 std::size_t padding);

/// Row gather: table [V, d], indices -> [indices.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> indices);

/// Unit L2 norm along the last axis. Zero rows raise NumericError.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a);

/// x·W + b with W [in, out] and b [out], applied over the last axis of x.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

}  // namespace partvit::ad
