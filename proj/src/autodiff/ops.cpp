#include "partvit/autodiff/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "partvit/errors.hpp"

namespace partvit::ad {

namespace {

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

/// outer x n x inner factorization of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
Node<T>* grad_target(Node<T>& self, std::size_t i) {
  Node<T>* in = self.inputs[i].get();
  return in->requires_grad ? in : nullptr;
}

/// Visits every element of `shape` in row-major order, passing the running
/// offset into a second array described by per-axis `strides`.
template <typename F>
void for_each_strided(const Shape& shape, const std::vector<std::size_t>& strides, F&& f) {
  const std::size_t rank = shape.size();
  const std::size_t total = numel(shape);
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  const std::size_t last = rank - 1;
  const std::size_t last_extent = shape[last];
  const std::size_t last_stride = strides[last];
  std::size_t flat = 0;
  while (flat < total) {
    for (std::size_t j = 0; j < last_extent; ++j) f(flat++, off + j * last_stride);
    // carry into higher axes
    std::size_t ax = last;
    while (ax > 0) {
      --ax;
      ++idx[ax];
      off += strides[ax];
      if (idx[ax] < shape[ax]) break;
      off -= strides[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m,n] += op(A) · op(B) for row-major buffers, op = optional transpose.
template <typename T>
void gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
              const T* a, const T* b, T* c) {
  using Map = Eigen::Map<const RowMat<T>>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMat<T>> C(c, M, N);
  if (!trans_a && !trans_b) {
    C.noalias() += Map(a, M, K) * Map(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += Map(a, M, K) * Map(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += Map(a, K, M).transpose() * Map(b, K, N);
  } else {
    C.noalias() += Map(a, K, M).transpose() * Map(b, N, K).transpose();
  }
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, OpKind kind, Fwd fwd, Deriv deriv) {
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, kind, [deriv](Node<T>& self) {
    if (auto* in = grad_target(self, 0)) {
      auto g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += self.grad[i] * deriv(in->data[i], self.data[i]);
      }
    }
  });
}

template <typename T>
void check_finite_if_debug(const Tensor<T>& a, const char* what) {
  if (!debug_checks()) return;
  for (T v : a.data()) {
    if (std::isnan(v)) throw NumericError(std::string(what) + ": NaN input");
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.size(-2), k = a.size(-1);
  const std::size_t kb = b.size(-2), n = b.size(-1);
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  if (k != kb || (!lead_a.empty() && !lead_b.empty() && lead_a != lead_b)) {
    throw DimensionError("matmul shape mismatch " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const Shape& lead = lead_a.empty() ? lead_b : lead_a;
  const std::size_t batch = numel(lead);
  const bool shared_a = lead_a.empty() && !lead_b.empty();
  const bool shared_b = lead_b.empty();
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<T> out(batch * m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (shared_b) {
    gemm_acc(false, false, batch * m, n, k, pa, pb, out.data());
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      gemm_acc(false, false, m, n, k, pa + (shared_a ? 0 : i * m * k), pb + i * k * n,
               out.data() + i * m * n);
    }
  }

  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {a, b}, OpKind::matmul,
      [batch, m, n, k, shared_a, shared_b](Node<T>& self) {
        Node<T>* na = self.inputs[0].get();
        Node<T>* nb = self.inputs[1].get();
        const T* g = self.grad.data();
        if (na->requires_grad) {
          T* ga = na->grad_buffer().data();
          if (shared_b) {
            gemm_acc(false, true, batch * m, k, n, g, nb->data.data(), ga);
          } else {
            for (std::size_t i = 0; i < batch; ++i) {
              gemm_acc(false, true, m, k, n, g + i * m * n, nb->data.data() + i * k * n,
                       ga + (shared_a ? 0 : i * m * k));
            }
          }
        }
        if (nb->requires_grad) {
          T* gb = nb->grad_buffer().data();
          if (shared_b) {
            gemm_acc(true, false, k, n, batch * m, na->data.data(), g, gb);
          } else {
            for (std::size_t i = 0; i < batch; ++i) {
              gemm_acc(true, false, k, n, m, na->data.data() + (shared_a ? 0 : i * m * k),
                       g + i * m * n, gb + i * k * n);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, OpKind::add, [](Node<T>& self) {
    for (std::size_t j = 0; j < 2; ++j) {
      if (auto* in = grad_target(self, j)) in->accumulate_grad(self.grad);
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, OpKind::sub, [](Node<T>& self) {
    if (auto* in = grad_target(self, 0)) in->accumulate_grad(self.grad);
    if (auto* in = grad_target(self, 1)) {
      auto g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, OpKind::mul, [](Node<T>& self) {
    Node<T>* na = self.inputs[0].get();
    Node<T>* nb = self.inputs[1].get();
    if (na->requires_grad) {
      auto g = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb->data[i];
    }
    if (nb->requires_grad) {
      auto g = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(
      a, OpKind::scale, [factor](T v) { return v * factor; },
      [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return unary(
      a, OpKind::add_scalar, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
  const Shape& in = a.shape();
  if (in.size() > shape.size()) {
    throw DimensionError("cannot broadcast " + to_string(in) + " to " + to_string(shape));
  }
  const std::size_t lead = shape.size() - in.size();
  const auto in_strides = contiguous_strides(in);
  std::vector<std::size_t> strides(shape.size(), 0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] == shape[lead + i]) {
      strides[lead + i] = in_strides[i];
    } else if (in[i] != 1) {
      throw DimensionError("cannot broadcast " + to_string(in) + " to " + to_string(shape));
    }
  }
  const auto x = a.data();
  std::vector<T> out(numel(shape));
  for_each_strided(shape, strides, [&](std::size_t o, std::size_t i) { out[o] = x[i]; });
  return Tensor<T>::make_result(shape, std::move(out), {a}, OpKind::broadcast,
                                [strides](Node<T>& self) {
                                  if (auto* src = grad_target(self, 0)) {
                                    auto g = src->grad_buffer();
                                    for_each_strided(self.shape, strides,
                                                     [&](std::size_t o, std::size_t i) {
                                                       g[i] += self.grad[o];
                                                     });
                                  }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::make_result(shape, std::move(out), {a}, OpKind::reshape, [](Node<T>& self) {
    if (auto* in = grad_target(self, 0)) in->accumulate_grad(self.grad);
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) {
    throw DimensionError("permutation rank mismatch for shape " + to_string(in));
  }
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw DimensionError("invalid permutation");
    seen[p] = true;
  }
  const auto in_strides = contiguous_strides(in);
  Shape out_shape(in.size());
  std::vector<std::size_t> strides(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out_shape[i] = in[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  const auto x = a.data();
  std::vector<T> out(x.size());
  for_each_strided(out_shape, strides, [&](std::size_t o, std::size_t i) { out[o] = x[i]; });
  return Tensor<T>::make_result(out_shape, std::move(out), {a}, OpKind::permute,
                                [strides](Node<T>& self) {
                                  if (auto* src = grad_target(self, 0)) {
                                    auto g = src->grad_buffer();
                                    for_each_strided(self.shape, strides,
                                                     [&](std::size_t o, std::size_t i) {
                                                       g[i] += self.grad[o];
                                                     });
                                  }
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1) {
  const auto i0 = norm_axis(axis0, a.dim());
  const auto i1 = norm_axis(axis1, a.dim());
  std::vector<std::size_t> perm(a.dim());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[i0], perm[i1]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const std::size_t rank = parts[0].dim();
  const std::size_t ax = norm_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != rank) throw DimensionError("concat rank mismatch");
    extents.push_back(probe[ax]);
    probe[ax] = 0;
    Shape ref = out_shape;
    ref[ax] = 0;
    if (probe != ref) {
      throw DimensionError("concat shape mismatch " + to_string(parts[0].shape()) + " vs " +
                           to_string(p.shape()));
    }
    out_shape[ax] += extents.back();
  }
  const auto split = split_at(out_shape, ax);
  std::vector<T> out(numel(out_shape));
  std::size_t base = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto x = parts[p].data();
    const std::size_t chunk = extents[p] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(x.data() + o * chunk, chunk, out.data() + o * split.n * split.inner + base);
    }
    base += chunk;
  }
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  return Tensor<T>::make_result(
      out_shape, std::move(out), std::move(inputs), OpKind::concat,
      [extents, split](Node<T>& self) {
        std::size_t base = 0;
        for (std::size_t p = 0; p < extents.size(); ++p) {
          const std::size_t chunk = extents[p] * split.inner;
          if (auto* in = grad_target(self, p)) {
            auto g = in->grad_buffer();
            for (std::size_t o = 0; o < split.outer; ++o) {
              const T* src = self.grad.data() + o * split.n * split.inner + base;
              for (std::size_t j = 0; j < chunk; ++j) g[o * chunk + j] += src[j];
            }
          }
          base += chunk;
        }
      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, a.dim());
  if (begin >= end || end > a.shape()[ax]) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for axis extent " + std::to_string(a.shape()[ax]));
  }
  const auto split = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t chunk = (end - begin) * split.inner;
  const std::size_t offset = begin * split.inner;
  const auto x = a.data();
  std::vector<T> out(split.outer * chunk);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.data() + o * split.n * split.inner + offset, chunk, out.data() + o * chunk);
  }
  return Tensor<T>::make_result(out_shape, std::move(out), {a}, OpKind::slice,
                                [split, chunk, offset](Node<T>& self) {
                                  if (auto* in = grad_target(self, 0)) {
                                    auto g = in->grad_buffer();
                                    for (std::size_t o = 0; o < split.outer; ++o) {
                                      T* dst = g.data() + o * split.n * split.inner + offset;
                                      for (std::size_t j = 0; j < chunk; ++j) {
                                        dst[j] += self.grad[o * chunk + j];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total(0);
  for (T v : a.data()) total += v;
  return Tensor<T>::make_result(Shape{1}, {total}, {a}, OpKind::sum, [](Node<T>& self) {
    if (auto* in = grad_target(self, 0)) {
      const T g0 = self.grad[0];
      for (auto& g : in->grad_buffer()) g += g0;
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.dim());
  const auto split = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape.push_back(1);
  }
  const auto x = a.data();
  std::vector<T> out(split.outer * split.inner, T(0));
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t j = 0; j < split.n; ++j) {
      const T* row = x.data() + (o * split.n + j) * split.inner;
      T* dst = out.data() + o * split.inner;
      for (std::size_t i = 0; i < split.inner; ++i) dst[i] += row[i];
    }
  }
  return Tensor<T>::make_result(out_shape, std::move(out), {a}, OpKind::sum, [split](Node<T>& self) {
    if (auto* in = grad_target(self, 0)) {
      auto g = in->grad_buffer();
      for (std::size_t o = 0; o < split.outer; ++o) {
        const T* src = self.grad.data() + o * split.inner;
        for (std::size_t j = 0; j < split.n; ++j) {
          T* dst = g.data() + (o * split.n + j) * split.inner;
          for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim) {
  const std::size_t n = a.shape()[norm_axis(axis, a.dim())];
  return scale(sum(a, axis, keepdim), T(1) / static_cast<T>(n));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(
      a, OpKind::relu, [](T v) { return v > T(0) ? v : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary(
      a, OpKind::gelu, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(
      a, OpKind::sigmoid,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary(
      a, OpKind::tanh, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  check_finite_if_debug(a, "softmax");
  const auto split = split_at(a.shape(), norm_axis(axis, a.dim()));
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.n * split.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < split.n; ++j) mx = std::max(mx, x[base + j * split.inner]);
      T denom(0);
      for (std::size_t j = 0; j < split.n; ++j) {
        const T e = std::exp(x[base + j * split.inner] - mx);
        out[base + j * split.inner] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < split.n; ++j) out[base + j * split.inner] /= denom;
    }
  }
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, OpKind::softmax,
                                [split](Node<T>& self) {
                                  auto* in = grad_target(self, 0);
                                  if (!in) return;
                                  auto g = in->grad_buffer();
                                  const auto& y = self.data;
                                  const auto& dy = self.grad;
                                  for (std::size_t o = 0; o < split.outer; ++o) {
                                    for (std::size_t i = 0; i < split.inner; ++i) {
                                      const std::size_t base = o * split.n * split.inner + i;
                                      T dot(0);
                                      for (std::size_t j = 0; j < split.n; ++j) {
                                        const auto k = base + j * split.inner;
                                        dot += dy[k] * y[k];
                                      }
                                      for (std::size_t j = 0; j < split.n; ++j) {
                                        const auto k = base + j * split.inner;
                                        g[k] += y[k] * (dy[k] - dot);
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis) {
  check_finite_if_debug(a, "log_softmax");
  const auto split = split_at(a.shape(), norm_axis(axis, a.dim()));
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.n * split.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < split.n; ++j) mx = std::max(mx, x[base + j * split.inner]);
      T denom(0);
      for (std::size_t j = 0; j < split.n; ++j) denom += std::exp(x[base + j * split.inner] - mx);
      const T lse = mx + std::log(denom);
      for (std::size_t j = 0; j < split.n; ++j) {
        out[base + j * split.inner] = x[base + j * split.inner] - lse;
      }
    }
  }
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, OpKind::log_softmax,
                                [split](Node<T>& self) {
                                  auto* in = grad_target(self, 0);
                                  if (!in) return;
                                  auto g = in->grad_buffer();
                                  for (std::size_t o = 0; o < split.outer; ++o) {
                                    for (std::size_t i = 0; i < split.inner; ++i) {
                                      const std::size_t base = o * split.n * split.inner + i;
                                      T total(0);
                                      for (std::size_t j = 0; j < split.n; ++j) {
                                        total += self.grad[base + j * split.inner];
                                      }
                                      for (std::size_t j = 0; j < split.n; ++j) {
                                        const auto k = base + j * split.inner;
                                        g[k] += self.grad[k] - std::exp(self.data[k]) * total;
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.size(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta " + to_string(gamma.shape()) + "/" +
                         to_string(beta.shape()) + " do not match last axis of " +
                         to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu(0);
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var(0);
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * rs;
      xhat[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, OpKind::layer_norm,
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        Node<T>* nx = self.inputs[0].get();
        Node<T>* ng = self.inputs[1].get();
        Node<T>* nb = self.inputs[2].get();
        const auto& gam = ng->data;
        const auto& dy = self.grad;
        if (ng->requires_grad) {
          auto g = ng->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) g[i] += dy[r * d + i] * xhat[r * d + i];
        }
        if (nb->requires_grad) {
          auto g = nb->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) g[i] += dy[r * d + i];
        }
        if (nx->requires_grad) {
          auto g = nx->grad_buffer();
          const T inv_d = T(1) / static_cast<T>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh(0), mean_dh_h(0);
            for (std::size_t i = 0; i < d; ++i) {
              const T dh = dy[r * d + i] * gam[i];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + i];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t i = 0; i < d; ++i) {
              const T dh = dy[r * d + i] * gam[i];
              g[r * d + i] += rstd[r] * (dh - mean_dh - xhat[r * d + i] * mean_dh_h);
            }
          }
        }
      });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t col_rows() const { return c * kh * kw; }
  std::size_t col_cols() const { return oh * ow; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* img, T* col) {
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* dst = col + ((ci * g.kh + ky) * g.kw + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            dst[oy * g.ow + ox] =
                inside ? img[(ci * g.h + static_cast<std::size_t>(iy)) * g.w +
                             static_cast<std::size_t>(ix)]
                       : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const ConvGeometry& g, const T* col, T* img) {
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* src = col + ((ci * g.kh + ky) * g.kw + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                src[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t padding) {
  if (x.dim() != 4 || w.dim() != 4 || x.size(1) != w.size(1)) {
    throw DimensionError("conv2d: incompatible input " + to_string(x.shape()) + " and kernel " +
                         to_string(w.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = x.size(0);
  g.c = x.size(1);
  g.h = x.size(2);
  g.w = x.size(3);
  g.f = w.size(0);
  g.kh = w.size(2);
  g.kw = w.size(3);
  g.stride = stride;
  g.pad = padding;
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " +
                         to_string(x.shape()));
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t col_size = g.col_rows() * g.col_cols();
  std::vector<T> cols(g.n * col_size);
  std::vector<T> out(g.n * g.f * g.col_cols(), T(0));
  const T* px = x.data().data();
  const T* pw = w.data().data();
  for (std::size_t i = 0; i < g.n; ++i) {
    T* col = cols.data() + i * col_size;
    im2col(g, px + i * g.c * g.h * g.w, col);
    gemm_acc(false, false, g.f, g.col_cols(), g.col_rows(), pw, col,
             out.data() + i * g.f * g.col_cols());
  }
  return Tensor<T>::make_result(
      Shape{g.n, g.f, g.oh, g.ow}, std::move(out), {x, w}, OpKind::conv2d,
      [g, col_size, cols = std::move(cols)](Node<T>& self) {
        Node<T>* nx = self.inputs[0].get();
        Node<T>* nw = self.inputs[1].get();
        const std::size_t out_per = g.f * g.col_cols();
        if (nw->requires_grad) {
          T* gw = nw->grad_buffer().data();
          for (std::size_t i = 0; i < g.n; ++i) {
            gemm_acc(false, true, g.f, g.col_rows(), g.col_cols(), self.grad.data() + i * out_per,
                     cols.data() + i * col_size, gw);
          }
        }
        if (nx->requires_grad) {
          T* gx = nx->grad_buffer().data();
          std::vector<T> dcol(col_size);
          for (std::size_t i = 0; i < g.n; ++i) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm_acc(true, false, g.col_rows(), g.col_cols(), g.f, nw->data.data(),
                     self.grad.data() + i * out_per, dcol.data());
            col2im_acc(g, dcol.data(), gx + i * g.c * g.h * g.w);
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> indices) {
  if (table.dim() != 2) throw DimensionError("embedding table must be rank 2");
  const std::size_t vocab = table.size(0), d = table.size(1);
  if (indices.empty()) throw ContractError("embedding with no indices");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const auto t = table.data();
  std::vector<T> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= vocab) {
      throw ContractError("embedding index " + std::to_string(idx[r]) + " out of range " +
                          std::to_string(vocab));
    }
    std::copy_n(t.data() + idx[r] * d, d, out.data() + r * d);
  }
  return Tensor<T>::make_result(Shape{idx.size(), d}, std::move(out), {table}, OpKind::embedding,
                                [idx, d](Node<T>& self) {
                                  if (auto* in = grad_target(self, 0)) {
                                    auto g = in->grad_buffer();
                                    for (std::size_t r = 0; r < idx.size(); ++r)
                                      for (std::size_t i = 0; i < d; ++i)
                                        g[idx[r] * d + i] += self.grad[r * d + i];
                                  }
                                });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a) {
  const std::size_t d = a.size(-1);
  const std::size_t rows = a.numel() / d;
  const auto x = a.data();
  std::vector<T> out(x.size());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss(0);
    for (std::size_t i = 0; i < d; ++i) ss += x[r * d + i] * x[r * d + i];
    const T nrm = std::sqrt(ss);
    if (!(nrm > T(0))) {
      throw NumericError("l2_normalize: row " + std::to_string(r) + " has zero norm");
    }
    norms[r] = nrm;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = x[r * d + i] / nrm;
  }
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, OpKind::l2_normalize,
                                [d, rows, norms = std::move(norms)](Node<T>& self) {
                                  auto* in = grad_target(self, 0);
                                  if (!in) return;
                                  auto g = in->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    T dot(0);
                                    for (std::size_t i = 0; i < d; ++i)
                                      dot += self.grad[r * d + i] * self.data[r * d + i];
                                    for (std::size_t i = 0; i < d; ++i) {
                                      g[r * d + i] +=
                                          (self.grad[r * d + i] - self.data[r * d + i] * dot) /
                                          norms[r];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  auto y = matmul(x, w);
  return add(y, broadcast_to(b, y.shape()));
}

#define PARTVIT_INSTANTIATE_OPS(T)                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                       \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                          \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                               \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);             \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                 \
  template Tensor<T> concat(std::span<const Tensor<T>>, int);                               \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                \
  template Tensor<T> sum(const Tensor<T>&);                                                 \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                \
  template Tensor<T> gelu(const Tensor<T>&);                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                             \
  template Tensor<T> tanh(const Tensor<T>&);                                                \
  template Tensor<T> softmax(const Tensor<T>&, int);                                        \
  template Tensor<T> log_softmax(const Tensor<T>&, int);                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);  \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::size_t>);             \
  template Tensor<T> l2_normalize(const Tensor<T>&);                                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

PARTVIT_INSTANTIATE_OPS(float)
PARTVIT_INSTANTIATE_OPS(double)

#undef PARTVIT_INSTANTIATE_OPS

}  // namespace partvit::ad
