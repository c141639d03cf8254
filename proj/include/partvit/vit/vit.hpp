#pragma once

#include <array>
#include <random>
#include <vector>

#include "partvit/autodiff/tensor.hpp"
#include "partvit/vit/config.hpp"
#include "partvit/vit/params.hpp"

namespace partvit {

/// Attention probabilities recorded during a forward pass, one entry per
/// layer, each of shape [B, h, T, T] (row = query token).
struct AttentionCapture {
  std::vector<ad::Shape> shapes;
  std::vector<std::vector<float>> probs;
};

struct ForwardOptions {
  bool training = false;
  /// Source for stochastic-depth masks; required when training with p > 0.
  std::mt19937_64* rng = nullptr;
  /// Overrides the config's stochastic depth rate when >= 0.
  double stochastic_depth_prob = -1.0;
  AttentionCapture* capture = nullptr;
};

/// Tiles [B, C, H, W] into non-overlapping K x K patches, row-major over the
/// grid (s = py * P + px), each flattened in (channel, row, col) order.
/// Result: [B, R, C*K*K].
template <typename T>
ad::Tensor<T> extract_regular_patches(const ad::Tensor<T>& image, std::size_t patch_size);

/// Normalized centres ((px + 0.5) / P, (py + 0.5) / P) of the regular grid.
std::vector<std::array<double, 2>> regular_grid_centers(std::size_t grid_side);

/// Fixed sinusoidal table [R, d]: sin on even columns, cos on odd ones.
std::vector<double> cosine_position_table(std::size_t positions, std::size_t dim);

/// Linear patch embedding plus prepended class token (no positions yet).
/// patches: [B, R, C*K*K] -> [B, R+1, d].
template <typename T>
ad::Tensor<T> embed_tokens(const ad::Tensor<T>& patches, const VitParams<T>& params);

/// Positional term added to the token sequence, [B, R+1, d]. `landmarks`
/// ([B, R, 2], normalized) feeds the coordinate kind; when undefined the
/// regular-grid centres are used.
template <typename T>
ad::Tensor<T> positional_terms(const PositionalParams<T>& params, const ModelConfig& cfg,
                               std::size_t batch, const ad::Tensor<T>& landmarks = {});

/// softmax(q k^T / sqrt(d_h)) v for one head. x: [B, T, d] -> [B, T, d_h].
template <typename T>
ad::Tensor<T> self_attention_head(const ad::Tensor<T>& x, const LinearParams<T>& query,
                                  const LinearParams<T>& key, const LinearParams<T>& value);

/// h heads computed in one batched product, concatenated and projected back
/// to d. x: [B, T, d] -> [B, T, d].
template <typename T>
ad::Tensor<T> multi_head_attention(const ad::Tensor<T>& x, const AttentionParams<T>& params,
                                   std::size_t heads, std::size_t head_dim,
                                   AttentionCapture* capture = nullptr);

/// Per-sample residual-branch drop. Kept samples are scaled by 1/(1-p) so
/// the expectation is unchanged; identity outside training.
template <typename T>
ad::Tensor<T> stochastic_depth(const ad::Tensor<T>& branch, double drop_prob, bool training,
                               std::mt19937_64* rng);

/// Pre-norm block: y = z + MSA(LN z); z' = y + MLP(LN y).
template <typename T>
ad::Tensor<T> transformer_layer(const ad::Tensor<T>& z, const TransformerLayerParams<T>& params,
                                const ModelConfig& cfg, const ForwardOptions& opts);

/// Runs all layers and the final norm, returning the class token [B, d].
template <typename T>
ad::Tensor<T> encode_tokens(const ad::Tensor<T>& tokens, const VitParams<T>& params,
                            const ModelConfig& cfg, const ForwardOptions& opts);

/// Holistic forward: regular tiling -> embedding -> positions -> trunk.
template <typename T>
ad::Tensor<T> fvit_forward(const ad::Tensor<T>& image, const VitParams<T>& params,
                           const ModelConfig& cfg, const ForwardOptions& opts = {});

}  // namespace partvit
