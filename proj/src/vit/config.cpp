#include "partvit/vit/config.hpp"

#include <cmath>

#include "partvit/errors.hpp"

namespace partvit {

std::string_view to_string(Variant v) { return v == Variant::holistic ? "holistic" : "part"; }

std::string_view to_string(PosEncoding p) {
  switch (p) {
    case PosEncoding::trainable: return "trainable";
    case PosEncoding::cosine: return "cosine";
    case PosEncoding::coordinate: return "coordinate";
  }
  return "trainable";
}

Variant parse_variant(std::string_view s) {
  if (s == "holistic") return Variant::holistic;
  if (s == "part") return Variant::part;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected holistic|part)");
}

PosEncoding parse_pos_encoding(std::string_view s) {
  if (s == "trainable") return PosEncoding::trainable;
  if (s == "cosine") return PosEncoding::cosine;
  if (s == "coordinate") return PosEncoding::coordinate;
  throw ConfigError("unknown positional encoding '" + std::string(s) +
                    "' (expected trainable|cosine|coordinate)");
}

std::size_t ModelConfig::grid_side() const {
  const auto p = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(num_patches))));
  if (p == 0 || p * p != num_patches) {
    throw ConfigError("num_patches=" + std::to_string(num_patches) + " is not a perfect square");
  }
  return p;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (channels == 0 || image_height == 0 || image_width == 0) fail("image geometry must be positive");
  if (embed_dim == 0 || mlp_dim == 0 || depth == 0 || heads == 0 || head_dim == 0) {
    fail("embed_dim, mlp_dim, depth, heads and head_dim must be positive");
  }
  if (patch_size == 0) fail("patch_size must be positive");
  const std::size_t p = grid_side();
  if (variant == Variant::holistic) {
    if (image_height % p != 0 || image_width % p != 0) {
      fail("holistic tiling needs H and W divisible by sqrt(R)=" + std::to_string(p));
    }
    if (image_height / p != patch_size || image_width / p != patch_size) {
      fail("holistic tiling needs K = H / sqrt(R) = " + std::to_string(image_height / p) +
           ", got K=" + std::to_string(patch_size));
    }
  }
  if (!(stochastic_depth_prob >= 0.0 && stochastic_depth_prob < 1.0)) {
    fail("stochastic_depth_prob must lie in [0, 1)");
  }
  if (bottleneck_violation) {
    if (variant != Variant::part) fail("bottleneck_violation requires the part variant");
    if (pos_encoding != PosEncoding::trainable) {
      fail("bottleneck_violation injects into the trainable positional table");
    }
  }
  if (variant == Variant::part) {
    if (landmark.channels.empty()) fail("landmark network needs at least one conv stage");
    if (landmark.kernel == 0 || landmark.stride == 0) fail("landmark kernel/stride must be positive");
  }
}

ModelConfig make_preset(std::string_view name) {
  ModelConfig cfg;
  if (name == "fvit-tiny") {
    return cfg;
  }
  if (name == "fvit-b" || name == "fvit-s") {
    cfg.preset = std::string(name);
    cfg.image_height = cfg.image_width = 112;
    cfg.num_patches = 196;
    cfg.patch_size = 8;
    cfg.depth = 12;
    cfg.heads = 11;
    if (name == "fvit-b") {
      cfg.embed_dim = 768;
      cfg.mlp_dim = 2048;
    } else {
      cfg.embed_dim = 512;
      cfg.mlp_dim = 2560;
    }
    cfg.head_dim = cfg.embed_dim / cfg.heads;
    return cfg;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected fvit-b|fvit-s|fvit-tiny)");
}

ModelConfig with_patch_count(ModelConfig cfg, std::size_t num_patches) {
  cfg.num_patches = num_patches;
  const std::size_t p = cfg.grid_side();
  if (cfg.image_height % p != 0) {
    throw ConfigError("image height " + std::to_string(cfg.image_height) +
                      " is not divisible by sqrt(R)=" + std::to_string(p));
  }
  cfg.patch_size = cfg.image_height / p;
  return cfg;
}

std::size_t count_backbone_parameters(const ModelConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  const std::size_t inner = cfg.heads * cfg.head_dim;
  std::size_t n = 0;
  n += cfg.patch_dim() * d + d;  // patch embedding E
  n += d;                        // class token
  n += d;                        // class positional slot
  if (cfg.pos_encoding == PosEncoding::trainable) n += cfg.num_patches * d;
  if (cfg.pos_encoding == PosEncoding::coordinate) n += 2 * d + d;
  const std::size_t per_layer = 2 * d + 2 * d                  // two layer norms
                                + 3 * (d * inner + inner)       // W_q, W_k, W_v
                                + inner * d + d                 // W_h
                                + d * cfg.mlp_dim + cfg.mlp_dim // MLP up
                                + cfg.mlp_dim * d + d;          // MLP down
  n += cfg.depth * per_layer;
  n += 2 * d;  // final layer norm
  if (cfg.variant == Variant::part) {
    std::size_t in = cfg.channels;
    const std::size_t k2 = cfg.landmark.kernel * cfg.landmark.kernel;
    for (auto c : cfg.landmark.channels) {
      n += c * in * k2 + c;
      in = c;
    }
    n += cfg.landmark.feature_dim() * cfg.output_count() + cfg.output_count();
    if (cfg.bottleneck_violation) n += (cfg.landmark.feature_dim() + d) * d + d;
  }
  return n;
}

}  // namespace partvit
