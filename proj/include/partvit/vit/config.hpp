#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace partvit {

enum class Variant { holistic, part };
enum class PosEncoding { trainable, cosine, coordinate };

std::string_view to_string(Variant v);
std::string_view to_string(PosEncoding p);
Variant parse_variant(std::string_view s);
PosEncoding parse_pos_encoding(std::string_view s);

/// Lightweight landmark regressor: strided 3x3 conv stages, global average
/// pool, one linear head emitting 2R numbers.
struct LandmarkNetConfig {
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::size_t kernel = 3;
  std::size_t stride = 2;

  std::size_t feature_dim() const { return channels.empty() ? 0 : channels.back(); }
};

struct ModelConfig {
  std::string preset = "fvit-tiny";
  std::size_t image_height = 56;
  std::size_t image_width = 56;
  std::size_t channels = 3;
  std::size_t num_patches = 49;  // R = P * P
  std::size_t patch_size = 8;    // K
  std::size_t embed_dim = 64;
  std::size_t mlp_dim = 128;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  Variant variant = Variant::holistic;
  PosEncoding pos_encoding = PosEncoding::trainable;
  bool bottleneck_violation = false;
  double stochastic_depth_prob = 0.1;
  LandmarkNetConfig landmark;

  /// P, the side of the patch grid. Throws ConfigError if R is not a square.
  std::size_t grid_side() const;
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t num_tokens() const { return num_patches + 1; }
  std::size_t output_count() const { return 2 * num_patches; }

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
};

/// Named architecture presets: "fvit-b", "fvit-s", "fvit-tiny".
ModelConfig make_preset(std::string_view name);

/// Re-tiles a configuration for R patches, deriving K = H / sqrt(R).
ModelConfig with_patch_count(ModelConfig cfg, std::size_t num_patches);

/// Trainable parameter count of the backbone (no classifier head),
/// computed from the configuration alone.
std::size_t count_backbone_parameters(const ModelConfig& cfg);

}  // namespace partvit
