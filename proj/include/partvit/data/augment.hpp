#pragma once

#include <random>
#include <string_view>
#include <vector>

#include "partvit/data/image.hpp"

namespace partvit {

/// Stage toggles follow the training ladder; stochastic depth and warm-up
/// are read by the model and the schedule, the rest act on images here.
struct AugmentConfig {
  bool flip = true;
  bool randaugment = true;
  bool resize_crop = true;
  bool stochastic_depth = true;
  bool mixup = true;
  bool cutout = true;
  bool warmup = true;

  std::size_t randaugment_ops = 2;
  double randaugment_magnitude = 2.0;  // on the 0..30 scale
  double mixup_alpha = 0.5;
  double mixup_prob = 0.2;
  double cutout_fraction = 0.1;  // of the image area
  double crop_min = 0.9;         // area fraction
  double crop_max = 1.0;

  void validate() const;
  /// Every stage switched off.
  static AugmentConfig none();
};

enum class RandOp {
  rotate,
  shear_x,
  shear_y,
  translate_x,
  translate_y,
  brightness,
  contrast,
  color,
  sharpness,
  autocontrast,
  equalize,
  posterize,
};

inline constexpr std::size_t kRandOpCount = 12;

std::string_view to_string(RandOp op);

Image flip_horizontal(const Image& img);

/// Crops a square covering `area_fraction` of the image with its top-left
/// corner at (offset_x, offset_y) in [0, 1] of the free range, then resizes
/// back to the original size bilinearly.
Image resize_crop(const Image& img, double area_fraction, double offset_x, double offset_y);

/// One RandAugment op at `magnitude` (0..30 scale); `negate` flips the
/// direction of signed ops.
Image apply_rand_op(const Image& img, RandOp op, double magnitude, bool negate);

Image randaugment(const Image& img, std::size_t num_ops, double magnitude, std::mt19937_64& rng);

/// Zeroes one square of area fraction `fraction`, fully inside the image.
Image cutout(const Image& img, double fraction, std::mt19937_64& rng);

/// Per-sample stages (flip, randaugment, resize & crop) in ladder order.
/// Eval mode returns the input unchanged.
Image augment(const Image& img, const AugmentConfig& cfg, std::mt19937_64& rng, bool train_mode);

/// lambda * a + (1 - lambda) * b.
Image mix_images(const Image& a, const Image& b, double lambda);

/// Beta(alpha, beta) via two gamma draws.
double sample_beta(double alpha, double beta, std::mt19937_64& rng);

struct MixupBatch {
  std::vector<Image> images;
  std::vector<std::size_t> labels_a;
  std::vector<std::size_t> labels_b;
  double lambda = 1.0;
  bool applied = false;

  /// Row-major [B, classes] soft targets lambda*onehot(a) + (1-lambda)*onehot(b).
  std::vector<double> soft_labels(std::size_t num_classes) const;
};

/// Batch-level stage: with probability mixup_prob, blends every image with a
/// randomly permuted partner using one lambda ~ Beta(alpha, alpha). Cutout,
/// the last stage of the ladder, is applied afterwards when enabled.
MixupBatch mixup_and_cutout(std::vector<Image> images, std::vector<std::size_t> labels,
                            const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace partvit
