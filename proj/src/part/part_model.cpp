#include <cmath>

#include "partvit/autodiff/ops.hpp"
#include "partvit/errors.hpp"
#include "partvit/part/part.hpp"

namespace partvit {

using ad::Shape;
using ad::Tensor;

template <typename T>
LandmarkNetParams<T> init_landmark_net(const ModelConfig& cfg, std::mt19937_64& rng) {
  const auto& lc = cfg.landmark;
  LandmarkNetParams<T> p;
  std::size_t in = cfg.channels;
  for (auto out : lc.channels) {
    const double fan_in = static_cast<double>(in * lc.kernel * lc.kernel);
    p.stages.push_back({init_normal<T>({out, in, lc.kernel, lc.kernel}, std::sqrt(2.0 / fan_in), rng),
                        Tensor<T>::zeros({out}, true)});
    in = out;
  }
  p.head = init_linear<T>(lc.feature_dim(), cfg.output_count(), 1e-3, rng);
  auto bias = p.head.bias.mutable_data();
  const auto centers = regular_grid_centers(cfg.grid_side());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    for (std::size_t a = 0; a < 2; ++a) {
      const double v = centers[i][a];
      bias[2 * i + a] = static_cast<T>(std::log(v / (1.0 - v)));
    }
  }
  return p;
}

template <typename T>
LandmarkOutput<T> landmark_net_forward(const Tensor<T>& image, const LandmarkNetParams<T>& params,
                                       const ModelConfig& cfg) {
  if (!params.defined()) throw ContractError("landmark network is not initialized");
  const auto& lc = cfg.landmark;
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != cfg.channels) {
    throw DimensionError("landmark network expects [B, " + std::to_string(cfg.channels) + ", H, W], got " +
                         ad::to_string(s));
  }
  if (params.head.bias.numel() != 2 * cfg.num_patches || params.stages.size() != lc.channels.size()) {
    throw ConfigError("landmark network geometry does not match the model config (R=" +
                      std::to_string(cfg.num_patches) + ")");
  }
  Tensor<T> x = image;
  for (const auto& stage : params.stages) {
    auto y = ad::conv2d(x, stage.weight, lc.stride, lc.kernel / 2);
    const std::size_t f = y.size(1);
    auto bias = ad::broadcast_to(ad::reshape(stage.bias, {1, f, 1, 1}), y.shape());
    x = ad::relu(ad::add(y, bias));
  }
  const std::size_t b = x.size(0), ch = x.size(1);
  auto pooled = ad::mean(ad::reshape(x, {b, ch, x.size(2) * x.size(3)}), 2);
  auto raw = ad::linear(pooled, params.head.weight, params.head.bias);
  const std::size_t r = raw.size(1) / 2;
  return {ad::reshape(ad::sigmoid(raw), {b, r, 2}), pooled};
}

template <typename T>
Tensor<T> bottleneck_violation_term(const Tensor<T>& features, const Tensor<T>& table,
                                    const LinearParams<T>& projector) {
  if (features.dim() != 2 || table.dim() != 2) {
    throw DimensionError("bottleneck term expects features [B, F] and table [R, d]");
  }
  const std::size_t b = features.size(0), f = features.size(1);
  const std::size_t r = table.size(0), d = table.size(1);
  auto feat = ad::broadcast_to(ad::reshape(features, {b, 1, f}), {b, r, f});
  auto rows = ad::broadcast_to(ad::reshape(table, {1, r, d}), {b, r, d});
  const std::vector<Tensor<T>> parts{feat, rows};
  return ad::linear(ad::concat<T>(parts, 2), projector.weight, projector.bias);
}

template <typename T>
Backbone<T> init_backbone(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Backbone<T> m;
  m.cfg = cfg;
  m.vit = init_vit<T>(cfg, rng);
  if (cfg.variant == Variant::part) {
    m.landmark = init_landmark_net<T>(cfg, rng);
    if (cfg.bottleneck_violation) {
      m.bottleneck = init_linear<T>(cfg.landmark.feature_dim() + cfg.embed_dim, cfg.embed_dim, 0.02, rng);
    }
  }
  return m;
}

template <typename T>
Tensor<T> part_fvit_forward_at(const Tensor<T>& image, const Tensor<T>& landmarks, const Backbone<T>& model,
                               const ForwardOptions& opts, const Tensor<T>& features) {
  const auto& cfg = model.cfg;
  const std::size_t b = image.size(0), r = cfg.num_patches, k = cfg.patch_size;
  auto patches = ad::reshape(grid_sample_patches(image, landmarks, k), {b, r, cfg.patch_dim()});
  auto tokens = embed_tokens(patches, model.vit);
  Tensor<T> pos;
  if (cfg.bottleneck_violation) {
    if (!features.defined()) throw ContractError("bottleneck violation needs landmark features");
    const std::size_t d = cfg.embed_dim;
    auto cls = ad::broadcast_to(ad::reshape(model.vit.position.class_slot, {1, 1, d}), {b, 1, d});
    auto leak = bottleneck_violation_term(features, model.vit.position.table, model.bottleneck);
    const std::vector<Tensor<T>> parts{cls, leak};
    pos = ad::concat<T>(parts, 1);
  } else {
    pos = positional_terms(model.vit.position, cfg, b, landmarks);
  }
  return encode_tokens(ad::add(tokens, pos), model.vit, cfg, opts);
}

template <typename T>
BackboneOutput<T> part_fvit_forward(const Tensor<T>& image, const Backbone<T>& model, const ForwardOptions& opts) {
  auto lm = landmark_net_forward(image, model.landmark, model.cfg);
  auto emb = part_fvit_forward_at(image, lm.landmarks, model, opts, lm.features);
  return {emb, lm.landmarks, lm.features};
}

template <typename T>
BackboneOutput<T> backbone_forward(const Tensor<T>& image, const Backbone<T>& model, const ForwardOptions& opts) {
  const auto& cfg = model.cfg;
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != cfg.channels || s[2] != cfg.image_height || s[3] != cfg.image_width) {
    throw DimensionError("expected image [B, " + std::to_string(cfg.channels) + ", " +
                         std::to_string(cfg.image_height) + ", " + std::to_string(cfg.image_width) +
                         "], got " + ad::to_string(s));
  }
  if (cfg.variant == Variant::part) return part_fvit_forward(image, model, opts);
  return {fvit_forward(image, model.vit, cfg, opts), regular_grid_landmarks<T>(s[0], cfg.grid_side()), {}};
}

#define PARTVIT_INSTANTIATE(T)                                                                        \
  template LandmarkNetParams<T> init_landmark_net<T>(const ModelConfig&, std::mt19937_64&);           \
  template LandmarkOutput<T> landmark_net_forward<T>(const Tensor<T>&, const LandmarkNetParams<T>&,   \
                                                     const ModelConfig&);                             \
  template Tensor<T> bottleneck_violation_term<T>(const Tensor<T>&, const Tensor<T>&,                 \
                                                  const LinearParams<T>&);                            \
  template Backbone<T> init_backbone<T>(const ModelConfig&, std::uint64_t);                           \
  template Tensor<T> part_fvit_forward_at<T>(const Tensor<T>&, const Tensor<T>&, const Backbone<T>&,  \
                                            const ForwardOptions&, const Tensor<T>&);                 \
  template BackboneOutput<T> part_fvit_forward<T>(const Tensor<T>&, const Backbone<T>&,               \
                                                  const ForwardOptions&);                             \
  template BackboneOutput<T> backbone_forward<T>(const Tensor<T>&, const Backbone<T>&,                \
                                                 const ForwardOptions&);

PARTVIT_INSTANTIATE(float)
PARTVIT_INSTANTIATE(double)

}  // namespace partvit
