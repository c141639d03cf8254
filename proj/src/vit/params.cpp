#include "partvit/vit/params.hpp"

#include <algorithm>

namespace partvit {

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::vit: return "vit";
    case ParamGroup::landmark: return "landmark";
    case ParamGroup::no_decay: return "no_decay";
  }
  return "vit";
}

template <typename T>
ad::Tensor<T> init_normal(const ad::Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * std::clamp(dist(rng), -2.0, 2.0));
  return ad::Tensor<T>::from_vector(shape, std::move(v), true);
}

template <typename T>
LinearParams<T> init_linear(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng) {
  return {init_normal<T>({in, out}, stddev, rng), ad::Tensor<T>::zeros({out}, true)};
}

template <typename T>
LayerNormParams<T> init_layer_norm(std::size_t dim) {
  return {ad::Tensor<T>::full({dim}, T(1), true), ad::Tensor<T>::zeros({dim}, true)};
}

template <typename T>
VitParams<T> init_vit(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  constexpr double kStd = 0.02;
  const std::size_t d = cfg.embed_dim;
  const std::size_t inner = cfg.heads * cfg.head_dim;
  VitParams<T> p;
  p.patch_embed = init_linear<T>(cfg.patch_dim(), d, kStd, rng);
  p.class_token = init_normal<T>({1, d}, kStd, rng);
  p.position.class_slot = init_normal<T>({1, d}, kStd, rng);
  if (cfg.pos_encoding == PosEncoding::trainable) {
    p.position.table = init_normal<T>({cfg.num_patches, d}, kStd, rng);
  } else if (cfg.pos_encoding == PosEncoding::coordinate) {
    p.position.coordinate = init_linear<T>(2, d, kStd, rng);
  }
  p.layers.resize(cfg.depth);
  for (auto& layer : p.layers) {
    layer.norm1 = init_layer_norm<T>(d);
    layer.attention.query = init_linear<T>(d, inner, kStd, rng);
    layer.attention.key = init_linear<T>(d, inner, kStd, rng);
    layer.attention.value = init_linear<T>(d, inner, kStd, rng);
    layer.attention.out = init_linear<T>(inner, d, kStd, rng);
    layer.norm2 = init_layer_norm<T>(d);
    layer.mlp_up = init_linear<T>(d, cfg.mlp_dim, kStd, rng);
    layer.mlp_down = init_linear<T>(cfg.mlp_dim, d, kStd, rng);
  }
  p.final_norm = init_layer_norm<T>(d);
  return p;
}

#define PARTVIT_INSTANTIATE(T)                                                                   \
  template ad::Tensor<T> init_normal<T>(const ad::Shape&, double, std::mt19937_64&);             \
  template LinearParams<T> init_linear<T>(std::size_t, std::size_t, double, std::mt19937_64&);   \
  template LayerNormParams<T> init_layer_norm<T>(std::size_t);                                   \
  template VitParams<T> init_vit<T>(const ModelConfig&, std::mt19937_64&);

PARTVIT_INSTANTIATE(float)
PARTVIT_INSTANTIATE(double)

}  // namespace partvit
