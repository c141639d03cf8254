#include "partvit/vit/vit.hpp"

#include <cmath>

#include "partvit/autodiff/ops.hpp"
#include "partvit/errors.hpp"

namespace partvit {

using ad::Shape;
using ad::Tensor;

namespace {

template <typename T>
void check_image(const Tensor<T>& image, const ModelConfig& cfg) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != cfg.channels || s[2] != cfg.image_height || s[3] != cfg.image_width) {
    throw DimensionError("expected image [B, " + std::to_string(cfg.channels) + ", " +
                         std::to_string(cfg.image_height) + ", " + std::to_string(cfg.image_width) +
                         "], got " + ad::to_string(s));
  }
}

// q, k, v: [B, h, T, d_h] -> context [B, h, T, d_h].
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t head_dim,
                 AttentionCapture* capture) {
  const T inv_sqrt = T(1) / static_cast<T>(std::sqrt(static_cast<double>(head_dim)));
  auto scores = ad::scale(ad::matmul(q, ad::transpose(k, -2, -1)), inv_sqrt);
  auto probs = ad::softmax(scores, -1);
  if (capture) {
    capture->shapes.push_back(probs.shape());
    capture->probs.emplace_back(probs.data().begin(), probs.data().end());
  }
  return ad::matmul(probs, v);
}

// [B, T, h*d_h] -> [B, h, T, d_h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads, std::size_t head_dim) {
  const std::size_t b = x.size(0), t = x.size(1);
  return ad::permute(ad::reshape(x, {b, t, heads, head_dim}), {0, 2, 1, 3});
}

}  // namespace

template <typename T>
Tensor<T> extract_regular_patches(const Tensor<T>& image, std::size_t patch_size) {
  const Shape& s = image.shape();
  if (s.size() != 4) throw DimensionError("expected [B, C, H, W], got " + ad::to_string(s));
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3], k = patch_size;
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw DimensionError("image " + ad::to_string(s) + " is not tiled by patch size " +
                         std::to_string(k));
  }
  const std::size_t py = h / k, px = w / k;
  auto blocks = ad::reshape(image, {b, c, py, k, px, k});
  auto ordered = ad::permute(blocks, {0, 2, 4, 1, 3, 5});
  return ad::reshape(ordered, {b, py * px, c * k * k});
}

std::vector<std::array<double, 2>> regular_grid_centers(std::size_t grid_side) {
  std::vector<std::array<double, 2>> centers;
  centers.reserve(grid_side * grid_side);
  const double p = static_cast<double>(grid_side);
  for (std::size_t py = 0; py < grid_side; ++py) {
    for (std::size_t px = 0; px < grid_side; ++px) {
      centers.push_back({(static_cast<double>(px) + 0.5) / p, (static_cast<double>(py) + 0.5) / p});
    }
  }
  return centers;
}

std::vector<double> cosine_position_table(std::size_t positions, std::size_t dim) {
  std::vector<double> table(positions * dim);
  for (std::size_t s = 0; s < positions; ++s) {
    for (std::size_t j = 0; j < dim; ++j) {
      const std::size_t pair = j / 2;
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(dim));
      const double angle = static_cast<double>(s) * freq;
      table[s * dim + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

template <typename T>
Tensor<T> embed_tokens(const Tensor<T>& patches, const VitParams<T>& params) {
  if (patches.dim() != 3) throw DimensionError("patches must be [B, R, C*K*K], got " + ad::to_string(patches.shape()));
  const std::size_t b = patches.size(0);
  const std::size_t d = params.class_token.size(1);
  auto tokens = ad::linear(patches, params.patch_embed.weight, params.patch_embed.bias);
  auto cls = ad::broadcast_to(ad::reshape(params.class_token, {1, 1, d}), {b, 1, d});
  const std::vector<Tensor<T>> parts{cls, tokens};
  return ad::concat<T>(parts, 1);
}

template <typename T>
Tensor<T> positional_terms(const PositionalParams<T>& params, const ModelConfig& cfg,
                           std::size_t batch, const Tensor<T>& landmarks) {
  const std::size_t d = cfg.embed_dim, r = cfg.num_patches;
  auto cls = ad::broadcast_to(ad::reshape(params.class_slot, {1, 1, d}), {batch, 1, d});
  Tensor<T> patch_terms;
  switch (cfg.pos_encoding) {
    case PosEncoding::trainable:
      if (!params.table.defined()) throw ConfigError("trainable positions need a table");
      patch_terms = ad::broadcast_to(ad::reshape(params.table, {1, r, d}), {batch, r, d});
      break;
    case PosEncoding::cosine: {
      const auto table = cosine_position_table(r, d);
      auto fixed = Tensor<T>::from_vector({1, r, d}, std::vector<T>(table.begin(), table.end()));
      patch_terms = ad::broadcast_to(fixed, {batch, r, d});
      break;
    }
    case PosEncoding::coordinate: {
      if (!params.coordinate.weight.defined()) throw ConfigError("coordinate positions need a projection");
      Tensor<T> coords = landmarks;
      if (!coords.defined()) {
        std::vector<T> grid;
        for (const auto& c : regular_grid_centers(cfg.grid_side())) {
          grid.push_back(static_cast<T>(c[0]));
          grid.push_back(static_cast<T>(c[1]));
        }
        coords = ad::broadcast_to(Tensor<T>::from_vector({1, r, 2}, std::move(grid)), {batch, r, 2});
      }
      if (coords.shape() != Shape{batch, r, 2}) {
        throw DimensionError("landmarks must be [B, R, 2], got " + ad::to_string(coords.shape()));
      }
      patch_terms = ad::linear(coords, params.coordinate.weight, params.coordinate.bias);
      break;
    }
  }
  const std::vector<Tensor<T>> parts{cls, patch_terms};
  return ad::concat<T>(parts, 1);
}

template <typename T>
Tensor<T> self_attention_head(const Tensor<T>& x, const LinearParams<T>& query,
                              const LinearParams<T>& key, const LinearParams<T>& value) {
  const std::size_t head_dim = query.weight.size(1);
  auto q = split_heads(ad::linear(x, query.weight, query.bias), 1, head_dim);
  auto k = split_heads(ad::linear(x, key.weight, key.bias), 1, head_dim);
  auto v = split_heads(ad::linear(x, value.weight, value.bias), 1, head_dim);
  auto ctx = attend(q, k, v, head_dim, nullptr);
  return ad::reshape(ctx, {x.size(0), x.size(1), head_dim});
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionParams<T>& params,
                               std::size_t heads, std::size_t head_dim, AttentionCapture* capture) {
  if (x.dim() != 3) throw DimensionError("attention input must be [B, T, d], got " + ad::to_string(x.shape()));
  const std::size_t b = x.size(0), t = x.size(1);
  auto q = split_heads(ad::linear(x, params.query.weight, params.query.bias), heads, head_dim);
  auto k = split_heads(ad::linear(x, params.key.weight, params.key.bias), heads, head_dim);
  auto v = split_heads(ad::linear(x, params.value.weight, params.value.bias), heads, head_dim);
  auto ctx = attend(q, k, v, head_dim, capture);
  auto merged = ad::reshape(ad::permute(ctx, {0, 2, 1, 3}), {b, t, heads * head_dim});
  return ad::linear(merged, params.out.weight, params.out.bias);
}

template <typename T>
Tensor<T> stochastic_depth(const Tensor<T>& branch, double drop_prob, bool training,
                           std::mt19937_64* rng) {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) {
    throw ConfigError("stochastic depth probability must lie in [0, 1), got " + std::to_string(drop_prob));
  }
  if (!training || drop_prob == 0.0) return branch;
  if (!rng) throw ContractError("stochastic depth in training mode needs an rng");
  const std::size_t b = branch.size(0);
  std::bernoulli_distribution keep(1.0 - drop_prob);
  std::vector<T> mask(b);
  for (auto& m : mask) m = keep(*rng) ? static_cast<T>(1.0 / (1.0 - drop_prob)) : T(0);
  Shape mask_shape(branch.dim(), 1);
  mask_shape[0] = b;
  auto m = ad::broadcast_to(Tensor<T>::from_vector(mask_shape, std::move(mask)), branch.shape());
  return ad::mul(branch, m);
}

template <typename T>
Tensor<T> transformer_layer(const Tensor<T>& z, const TransformerLayerParams<T>& params,
                            const ModelConfig& cfg, const ForwardOptions& opts) {
  const double p = opts.stochastic_depth_prob >= 0.0 ? opts.stochastic_depth_prob : cfg.stochastic_depth_prob;
  auto attn = multi_head_attention(ad::layer_norm(z, params.norm1.gamma, params.norm1.beta),
                                   params.attention, cfg.heads, cfg.head_dim, opts.capture);
  auto y = ad::add(z, stochastic_depth(attn, p, opts.training, opts.rng));
  auto hidden = ad::gelu(ad::linear(ad::layer_norm(y, params.norm2.gamma, params.norm2.beta),
                                    params.mlp_up.weight, params.mlp_up.bias));
  auto mlp = ad::linear(hidden, params.mlp_down.weight, params.mlp_down.bias);
  return ad::add(y, stochastic_depth(mlp, p, opts.training, opts.rng));
}

template <typename T>
Tensor<T> encode_tokens(const Tensor<T>& tokens, const VitParams<T>& params, const ModelConfig& cfg,
                        const ForwardOptions& opts) {
  Tensor<T> z = tokens;
  for (const auto& layer : params.layers) z = transformer_layer(z, layer, cfg, opts);
  z = ad::layer_norm(z, params.final_norm.gamma, params.final_norm.beta);
  return ad::reshape(ad::slice(z, 1, 0, 1), {z.size(0), cfg.embed_dim});
}

template <typename T>
Tensor<T> fvit_forward(const Tensor<T>& image, const VitParams<T>& params, const ModelConfig& cfg,
                       const ForwardOptions& opts) {
  check_image(image, cfg);
  auto patches = extract_regular_patches(image, cfg.patch_size);
  auto tokens = embed_tokens(patches, params);
  auto pos = positional_terms(params.position, cfg, image.size(0));
  return encode_tokens(ad::add(tokens, pos), params, cfg, opts);
}

#define PARTVIT_INSTANTIATE(T)                                                                    \
  template Tensor<T> extract_regular_patches<T>(const Tensor<T>&, std::size_t);                   \
  template Tensor<T> embed_tokens<T>(const Tensor<T>&, const VitParams<T>&);                      \
  template Tensor<T> positional_terms<T>(const PositionalParams<T>&, const ModelConfig&,          \
                                         std::size_t, const Tensor<T>&);                          \
  template Tensor<T> self_attention_head<T>(const Tensor<T>&, const LinearParams<T>&,             \
                                            const LinearParams<T>&, const LinearParams<T>&);      \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const AttentionParams<T>&,         \
                                             std::size_t, std::size_t, AttentionCapture*);        \
  template Tensor<T> stochastic_depth<T>(const Tensor<T>&, double, bool, std::mt19937_64*);       \
  template Tensor<T> transformer_layer<T>(const Tensor<T>&, const TransformerLayerParams<T>&,     \
                                          const ModelConfig&, const ForwardOptions&);             \
  template Tensor<T> encode_tokens<T>(const Tensor<T>&, const VitParams<T>&, const ModelConfig&,  \
                                      const ForwardOptions&);                                     \
  template Tensor<T> fvit_forward<T>(const Tensor<T>&, const VitParams<T>&, const ModelConfig&,   \
                                     const ForwardOptions&);

PARTVIT_INSTANTIATE(float)
PARTVIT_INSTANTIATE(double)

}  // namespace partvit
