#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "partvit/autodiff/tensor.hpp"

namespace partvit {

/// Planar float image, channel-major [C, H, W], values nominally in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  bool empty() const { return pixels.empty(); }
  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

/// Rounds every value to the nearest k/255 after clamping to [0, 1], so the
/// image survives an 8-bit PNG round trip unchanged.
void quantize_8bit(Image& img);

/// 8-bit PNG with 1 (gray) or 3 (RGB) channels.
void write_png(const std::filesystem::path& path, const Image& img);

/// Reads any PNG libpng understands and converts it to `channels` (1 or 3).
Image read_png(const std::filesystem::path& path, std::size_t channels = 3);

/// Stacks equally shaped images into [B, C, H, W].
ad::Tensor<float> stack_images(const std::vector<Image>& images);

}  // namespace partvit
