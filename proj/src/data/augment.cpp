#include "partvit/data/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "partvit/errors.hpp"

namespace partvit {

namespace {

constexpr double kPi = 3.14159265358979323846;

void clamp01(Image& img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

// Zero-padded bilinear read at pixel-index coordinates (u, v).
float sample_zero(const Image& img, std::size_t c, double u, double v) {
  const double fu = std::floor(u), fv = std::floor(v);
  const auto x0 = static_cast<long>(fu), y0 = static_cast<long>(fv);
  const double ax = u - fu, ay = v - fv;
  auto px = [&](long y, long x) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) return 0.0;
    return img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  const double top = px(y0, x0) * (1 - ax) + px(y0, x0 + 1) * ax;
  const double bottom = px(y0 + 1, x0) * (1 - ax) + px(y0 + 1, x0 + 1) * ax;
  return static_cast<float>(top * (1 - ay) + bottom * ay);
}

// Output pixel p maps to source m * (p - centre) + centre + shift, all in
// continuous pixel coordinates.
Image warp(const Image& img, const std::array<double, 4>& m, double shift_x, double shift_y) {
  Image out(img.channels, img.height, img.width);
  const double cx = img.width / 2.0, cy = img.height / 2.0;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double px = x + 0.5 - cx, py = y + 0.5 - cy;
      const double sx = m[0] * px + m[1] * py + cx + shift_x;
      const double sy = m[2] * px + m[3] * py + cy + shift_y;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(c, y, x) = sample_zero(img, c, sx - 0.5, sy - 0.5);
    }
  }
  return out;
}

Image grayscale_like(const Image& img) {
  Image g = img;
  if (img.channels != 3) return g;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const float l = 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
      for (std::size_t c = 0; c < 3; ++c) g.at(c, y, x) = l;
    }
  }
  return g;
}

// degenerate + factor * (img - degenerate), clamped.
Image blend_toward(const Image& img, const Image& degenerate, double factor) {
  Image out = img;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = static_cast<float>(degenerate.pixels[i] + factor * (img.pixels[i] - degenerate.pixels[i]));
  }
  clamp01(out);
  return out;
}

Image smoothed(const Image& img) {
  // 3x3 kernel [1 1 1; 1 5 1; 1 1 1] / 13 on the interior; borders untouched.
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 1; y + 1 < img.height; ++y) {
      for (std::size_t x = 1; x + 1 < img.width; ++x) {
        double s = 4.0 * img.at(c, y, x);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) s += img.at(c, y + dy, x + dx);
        out.at(c, y, x) = static_cast<float>(s / 13.0);
      }
    }
  }
  return out;
}

std::size_t level_of(float v) { return static_cast<std::size_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: ") + name + " must lie in [0, 1]");
  };
  prob(mixup_prob, "mixup_prob");
  prob(cutout_fraction, "cutout_fraction");
  if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0)) {
    throw ConfigError("augment: crop range must satisfy 0 < crop_min <= crop_max <= 1");
  }
  if (!(mixup_alpha > 0.0)) throw ConfigError("augment: mixup_alpha must be positive");
  if (!(randaugment_magnitude >= 0.0 && randaugment_magnitude <= 30.0)) {
    throw ConfigError("augment: randaugment_magnitude must lie in [0, 30]");
  }
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.flip = c.randaugment = c.resize_crop = c.stochastic_depth = c.mixup = c.cutout = c.warmup = false;
  return c;
}

std::string_view to_string(RandOp op) {
  static constexpr std::array<std::string_view, kRandOpCount> names{
      "rotate", "shear_x", "shear_y", "translate_x", "translate_y", "brightness",
      "contrast", "color", "sharpness", "autocontrast", "equalize", "posterize"};
  return names[static_cast<std::size_t>(op)];
}

Image flip_horizontal(const Image& img) {
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

Image resize_crop(const Image& img, double area_fraction, double offset_x, double offset_y) {
  const double side = std::sqrt(std::clamp(area_fraction, 1e-6, 1.0));
  const double cw = side * img.width, ch = side * img.height;
  const double x0 = std::clamp(offset_x, 0.0, 1.0) * (img.width - cw);
  const double y0 = std::clamp(offset_y, 0.0, 1.0) * (img.height - ch);
  Image out(img.channels, img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      // Continuous source position, then clamp-to-edge bilinear.
      const double u = std::clamp(x0 + (x + 0.5) * side - 0.5, 0.0, img.width - 1.0);
      const double v = std::clamp(y0 + (y + 0.5) * side - 0.5, 0.0, img.height - 1.0);
      const auto xa = static_cast<std::size_t>(u), ya = static_cast<std::size_t>(v);
      const std::size_t xb = std::min(xa + 1, img.width - 1), yb = std::min(ya + 1, img.height - 1);
      const double ax = u - xa, ay = v - ya;
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(c, ya, xa) * (1 - ax) + img.at(c, ya, xb) * ax;
        const double bottom = img.at(c, yb, xa) * (1 - ax) + img.at(c, yb, xb) * ax;
        out.at(c, y, x) = static_cast<float>(top * (1 - ay) + bottom * ay);
      }
    }
  }
  return out;
}

Image apply_rand_op(const Image& img, RandOp op, double magnitude, bool negate) {
  const double level = magnitude / 30.0;
  const double sign = negate ? -1.0 : 1.0;
  switch (op) {
    case RandOp::rotate: {
      const double a = sign * 30.0 * level * kPi / 180.0;
      return warp(img, {std::cos(a), std::sin(a), -std::sin(a), std::cos(a)}, 0, 0);
    }
    case RandOp::shear_x: return warp(img, {1, sign * 0.3 * level, 0, 1}, 0, 0);
    case RandOp::shear_y: return warp(img, {1, 0, sign * 0.3 * level, 1}, 0, 0);
    case RandOp::translate_x: return warp(img, {1, 0, 0, 1}, sign * 0.45 * level * img.width, 0);
    case RandOp::translate_y: return warp(img, {1, 0, 0, 1}, 0, sign * 0.45 * level * img.height);
    case RandOp::brightness: return blend_toward(img, Image(img.channels, img.height, img.width), 1 + sign * 0.9 * level);
    case RandOp::contrast: {
      const Image g = grayscale_like(img);
      const double mean = std::accumulate(g.pixels.begin(), g.pixels.end(), 0.0) / g.pixels.size();
      return blend_toward(img, Image(img.channels, img.height, img.width, static_cast<float>(mean)), 1 + sign * 0.9 * level);
    }
    case RandOp::color: return blend_toward(img, grayscale_like(img), 1 + sign * 0.9 * level);
    case RandOp::sharpness: return blend_toward(img, smoothed(img), 1 + sign * 0.9 * level);
    case RandOp::autocontrast: {
      Image out = img;
      const std::size_t plane = img.height * img.width;
      for (std::size_t c = 0; c < img.channels; ++c) {
        auto first = out.pixels.begin() + c * plane;
        auto [lo, hi] = std::minmax_element(first, first + plane);
        const float l = *lo, h = *hi;
        if (h > l) std::for_each(first, first + plane, [&](float& v) { v = (v - l) / (h - l); });
      }
      return out;
    }
    case RandOp::equalize: {
      Image out = img;
      const std::size_t plane = img.height * img.width;
      for (std::size_t c = 0; c < img.channels; ++c) {
        std::array<std::size_t, 256> hist{};
        for (std::size_t i = 0; i < plane; ++i) ++hist[level_of(img.pixels[c * plane + i])];
        std::array<std::size_t, 256> cdf{};
        std::partial_sum(hist.begin(), hist.end(), cdf.begin());
        const std::size_t cmin = *std::find_if(cdf.begin(), cdf.end(), [](std::size_t v) { return v > 0; });
        if (cdf.back() == cmin) continue;
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t lv = level_of(img.pixels[c * plane + i]);
          out.pixels[c * plane + i] = static_cast<float>(static_cast<double>(cdf[lv] - cmin) / (cdf.back() - cmin));
        }
      }
      return out;
    }
    case RandOp::posterize: {
      const int bits = 8 - static_cast<int>(std::lround(4.0 * level));
      const std::size_t mask = (0xFFu << (8 - bits)) & 0xFFu;
      Image out = img;
      for (auto& v : out.pixels) v = static_cast<float>(level_of(v) & mask) / 255.0f;
      return out;
    }
  }
  return img;
}

Image randaugment(const Image& img, std::size_t num_ops, double magnitude, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, kRandOpCount - 1);
  std::bernoulli_distribution coin(0.5);
  Image out = img;
  for (std::size_t i = 0; i < num_ops; ++i) {
    const auto op = static_cast<RandOp>(pick(rng));
    out = apply_rand_op(out, op, magnitude, coin(rng));
  }
  clamp01(out);
  return out;
}

Image cutout(const Image& img, double fraction, std::mt19937_64& rng) {
  Image out = img;
  const auto side_f = std::sqrt(fraction * static_cast<double>(img.height * img.width));
  const auto side = std::min<std::size_t>(static_cast<std::size_t>(std::lround(side_f)), std::min(img.height, img.width));
  if (side == 0) return out;
  std::uniform_int_distribution<std::size_t> ox(0, img.width - side), oy(0, img.height - side);
  const std::size_t x0 = ox(rng), y0 = oy(rng);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = y0; y < y0 + side; ++y)
      for (std::size_t x = x0; x < x0 + side; ++x) out.at(c, y, x) = 0.0f;
  return out;
}

Image augment(const Image& img, const AugmentConfig& cfg, std::mt19937_64& rng, bool train_mode) {
  if (!train_mode) return img;
  Image out = img;
  if (cfg.flip && std::bernoulli_distribution(0.5)(rng)) out = flip_horizontal(out);
  if (cfg.randaugment) out = randaugment(out, cfg.randaugment_ops, cfg.randaugment_magnitude, rng);
  if (cfg.resize_crop) {
    std::uniform_real_distribution<double> area(cfg.crop_min, cfg.crop_max), off(0.0, 1.0);
    const double a = area(rng);
    const double ox = off(rng), oy = off(rng);
    out = resize_crop(out, a, ox, oy);
  }
  clamp01(out);
  return out;
}

Image mix_images(const Image& a, const Image& b, double lambda) {
  if (!a.same_shape(b)) throw DimensionError("mix_images: images differ in shape");
  Image out = a;
  if (lambda == 1.0) return out;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = static_cast<float>(lambda * a.pixels[i] + (1.0 - lambda) * b.pixels[i]);
  }
  return out;
}

double sample_beta(double alpha, double beta, std::mt19937_64& rng) {
  const double x = std::gamma_distribution<double>(alpha, 1.0)(rng);
  const double y = std::gamma_distribution<double>(beta, 1.0)(rng);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

std::vector<double> MixupBatch::soft_labels(std::size_t num_classes) const {
  std::vector<double> out(labels_a.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels_a.size(); ++i) {
    out[i * num_classes + labels_a[i]] += lambda;
    out[i * num_classes + labels_b[i]] += 1.0 - lambda;
  }
  return out;
}

MixupBatch mixup_and_cutout(std::vector<Image> images, std::vector<std::size_t> labels, const AugmentConfig& cfg,
                            std::mt19937_64& rng) {
  if (images.size() != labels.size()) throw DimensionError("mixup: images and labels differ in count");
  MixupBatch batch;
  batch.labels_a = labels;
  batch.labels_b = labels;
  if (cfg.mixup && images.size() > 1 && std::bernoulli_distribution(cfg.mixup_prob)(rng)) {
    std::vector<std::size_t> perm(images.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    batch.lambda = sample_beta(cfg.mixup_alpha, cfg.mixup_alpha, rng);
    batch.applied = true;
    std::vector<Image> mixed;
    mixed.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      mixed.push_back(mix_images(images[i], images[perm[i]], batch.lambda));
      batch.labels_b[i] = labels[perm[i]];
    }
    images = std::move(mixed);
  }
  if (cfg.cutout) {
    for (auto& img : images) img = cutout(img, cfg.cutout_fraction, rng);
  }
  batch.images = std::move(images);
  return batch;
}

}  // namespace partvit
