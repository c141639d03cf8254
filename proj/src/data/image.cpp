#include "partvit/data/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "partvit/errors.hpp"

namespace partvit {

void quantize_8bit(Image& img) {
  for (auto& v : img.pixels) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw ContractError("write_png supports 1 or 3 channels, got " + std::to_string(img.channels));
  }
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(img.width);
  out.height = static_cast<png_uint_32>(img.height);
  out.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buf(img.pixels.size());
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        buf[(y * img.width + x) * img.channels + c] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
    }
  }
  if (!png_image_write_to_file(&out, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + out.message);
  }
}

Image read_png(const std::filesystem::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ContractError("read_png converts to 1 or 3 channels");
  png_image in{};
  in.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&in, path.c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + in.message);
  }
  in.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(in));
  if (!png_image_finish_read(&in, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = in.message;
    png_image_free(&in);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  Image img(channels, in.height, in.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        img.at(c, y, x) = static_cast<float>(buf[(y * img.width + x) * channels + c]) / 255.0f;
      }
    }
  }
  return img;
}

ad::Tensor<float> stack_images(const std::vector<Image>& images) {
  if (images.empty()) throw ContractError("stack_images needs at least one image");
  const Image& first = images.front();
  std::vector<float> data;
  data.reserve(images.size() * first.pixels.size());
  for (const auto& img : images) {
    if (!img.same_shape(first)) throw DimensionError("stack_images: images differ in shape");
    data.insert(data.end(), img.pixels.begin(), img.pixels.end());
  }
  return ad::Tensor<float>::from_vector({images.size(), first.channels, first.height, first.width},
                                        std::move(data));
}

}  // namespace partvit
