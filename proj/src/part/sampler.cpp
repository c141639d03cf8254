#include <cmath>

#include "partvit/errors.hpp"
#include "partvit/part/part.hpp"

namespace partvit {

using ad::Node;
using ad::Shape;
using ad::Tensor;

namespace {

// One axis of the bilinear footprint: lower index, weight of the upper
// neighbour, and whether the read position moved with the landmark (false
// once clamped to the border).
struct Tap {
  std::size_t lo, hi;
  double frac;
  bool live;
};

Tap make_tap(double u, std::size_t extent) {
  const double last = static_cast<double>(extent - 1);
  bool live = true;
  if (u < 0.0) {
    u = 0.0;
    live = false;
  } else if (u > last) {
    u = last;
    live = false;
  }
  if (extent == 1) return {0, 0, 0.0, false};
  auto lo = static_cast<std::size_t>(std::floor(u));
  if (lo > extent - 2) lo = extent - 2;
  return {lo, lo + 1, u - static_cast<double>(lo), live};
}

std::vector<Tap> taps_for(double centre_px, std::size_t k, std::size_t extent) {
  std::vector<Tap> taps(k);
  const double half = (static_cast<double>(k) - 1.0) / 2.0;
  for (std::size_t j = 0; j < k; ++j) {
    // Continuous position minus 0.5 converts to pixel-index coordinates.
    taps[j] = make_tap(centre_px + static_cast<double>(j) - half - 0.5, extent);
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> grid_sample_patches(const Tensor<T>& image, const Tensor<T>& landmarks, std::size_t patch_size) {
  const Shape& is = image.shape();
  if (is.size() != 4) throw DimensionError("image must be [B, C, H, W], got " + ad::to_string(is));
  const std::size_t b = is[0], c = is[1], h = is[2], w = is[3], k = patch_size;
  const Shape& ls = landmarks.shape();
  if (ls.size() != 3 || ls[0] != b || ls[2] != 2) {
    throw DimensionError("landmarks must be [" + std::to_string(b) + ", R, 2], got " + ad::to_string(ls));
  }
  if (k == 0) throw DimensionError("patch size must be positive");
  const std::size_t r = ls[1];
  const auto lm = landmarks.data();
  for (std::size_t i = 0; i < lm.size(); ++i) {
    if (!std::isfinite(static_cast<double>(lm[i]))) {
      throw NumericError("grid_sample_patches: non-finite landmark coordinate at flat index " +
                         std::to_string(i));
    }
  }

  const auto img = image.data();
  std::vector<T> out(b * r * c * k * k);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t p = 0; p < r; ++p) {
      const auto tx = taps_for(static_cast<double>(lm[(n * r + p) * 2]) * static_cast<double>(w), k, w);
      const auto ty = taps_for(static_cast<double>(lm[(n * r + p) * 2 + 1]) * static_cast<double>(h), k, h);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* plane = img.data() + (n * c + ch) * h * w;
        T* dst = out.data() + ((n * r + p) * c + ch) * k * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const Tap& y = ty[ky];
          const T* row0 = plane + y.lo * w;
          const T* row1 = plane + y.hi * w;
          const T fy = static_cast<T>(y.frac);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const Tap& x = tx[kx];
            const T fx = static_cast<T>(x.frac);
            const T top = row0[x.lo] + fx * (row0[x.hi] - row0[x.lo]);
            const T bottom = row1[x.lo] + fx * (row1[x.hi] - row1[x.lo]);
            dst[ky * k + kx] = top + fy * (bottom - top);
          }
        }
      }
    }
  }

  auto backward = [b, c, h, w, r, k](Node<T>& self) {
    Node<T>* img_node = self.inputs[0]->requires_grad ? self.inputs[0].get() : nullptr;
    Node<T>* lm_node = self.inputs[1]->requires_grad ? self.inputs[1].get() : nullptr;
    const auto& px = self.inputs[0]->data;
    const auto& lmv = self.inputs[1]->data;
    std::span<T> gimg, glm;
    if (img_node) gimg = img_node->grad_buffer();
    if (lm_node) glm = lm_node->grad_buffer();
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t p = 0; p < r; ++p) {
        const auto tx = taps_for(static_cast<double>(lmv[(n * r + p) * 2]) * static_cast<double>(w), k, w);
        const auto ty = taps_for(static_cast<double>(lmv[(n * r + p) * 2 + 1]) * static_cast<double>(h), k, h);
        double du_sum = 0.0, dv_sum = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t base = (n * c + ch) * h * w;
          const T* g = self.grad.data() + ((n * r + p) * c + ch) * k * k;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const Tap& y = ty[ky];
            const double fy = y.frac;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const Tap& x = tx[kx];
              const double fx = x.frac;
              const double go = static_cast<double>(g[ky * k + kx]);
              const std::size_t i00 = base + y.lo * w + x.lo, i01 = base + y.lo * w + x.hi;
              const std::size_t i10 = base + y.hi * w + x.lo, i11 = base + y.hi * w + x.hi;
              if (img_node) {
                gimg[i00] += static_cast<T>(go * (1 - fx) * (1 - fy));
                gimg[i01] += static_cast<T>(go * fx * (1 - fy));
                gimg[i10] += static_cast<T>(go * (1 - fx) * fy);
                gimg[i11] += static_cast<T>(go * fx * fy);
              }
              if (lm_node) {
                const double v00 = px[i00], v01 = px[i01], v10 = px[i10], v11 = px[i11];
                if (x.live) du_sum += go * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                if (y.live) dv_sum += go * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
              }
            }
          }
        }
        if (lm_node) {
          glm[(n * r + p) * 2] += static_cast<T>(du_sum * static_cast<double>(w));
          glm[(n * r + p) * 2 + 1] += static_cast<T>(dv_sum * static_cast<double>(h));
        }
      }
    }
  };
  return Tensor<T>::make_result(Shape{b, r, c, k, k}, std::move(out), {image, landmarks},
                                ad::OpKind::custom, std::move(backward));
}

template <typename T>
Tensor<T> regular_grid_landmarks(std::size_t batch, std::size_t grid_side) {
  std::vector<T> v;
  v.reserve(batch * grid_side * grid_side * 2);
  const auto centers = regular_grid_centers(grid_side);
  for (std::size_t n = 0; n < batch; ++n) {
    for (const auto& c : centers) {
      v.push_back(static_cast<T>(c[0]));
      v.push_back(static_cast<T>(c[1]));
    }
  }
  return Tensor<T>::from_vector({batch, centers.size(), 2}, std::move(v));
}

template Tensor<float> grid_sample_patches<float>(const Tensor<float>&, const Tensor<float>&, std::size_t);
template Tensor<double> grid_sample_patches<double>(const Tensor<double>&, const Tensor<double>&, std::size_t);
template Tensor<float> regular_grid_landmarks<float>(std::size_t, std::size_t);
template Tensor<double> regular_grid_landmarks<double>(std::size_t, std::size_t);

}  // namespace partvit
