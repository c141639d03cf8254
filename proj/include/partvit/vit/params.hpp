#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "partvit/autodiff/tensor.hpp"
#include "partvit/vit/config.hpp"

namespace partvit {

/// Optimizer group a parameter belongs to; selects its weight decay.
enum class ParamGroup { vit, landmark, no_decay };

std::string_view to_string(ParamGroup g);

template <typename T>
struct LinearParams {
  ad::Tensor<T> weight;  // [in, out]
  ad::Tensor<T> bias;    // [out]

  template <typename F>
  void visit(const std::string& prefix, ParamGroup group, F&& f) {
    f(prefix + ".weight", weight, group);
    f(prefix + ".bias", bias, group);
  }
};

template <typename T>
struct LayerNormParams {
  ad::Tensor<T> gamma;
  ad::Tensor<T> beta;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma, ParamGroup::no_decay);
    f(prefix + ".beta", beta, ParamGroup::no_decay);
  }
};

template <typename T>
struct AttentionParams {
  // Per-head projections stacked along the output axis: head i owns
  // columns [i*d_h, (i+1)*d_h).
  LinearParams<T> query, key, value;
  LinearParams<T> out;  // [h*d_h, d]

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    query.visit(prefix + ".query", ParamGroup::vit, f);
    key.visit(prefix + ".key", ParamGroup::vit, f);
    value.visit(prefix + ".value", ParamGroup::vit, f);
    out.visit(prefix + ".out", ParamGroup::vit, f);
  }
};

template <typename T>
struct TransformerLayerParams {
  LayerNormParams<T> norm1;
  AttentionParams<T> attention;
  LayerNormParams<T> norm2;
  LinearParams<T> mlp_up;
  LinearParams<T> mlp_down;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    attention.visit(prefix + ".attn", f);
    norm2.visit(prefix + ".norm2", f);
    mlp_up.visit(prefix + ".mlp_up", ParamGroup::vit, f);
    mlp_down.visit(prefix + ".mlp_down", ParamGroup::vit, f);
  }
};

template <typename T>
struct PositionalParams {
  ad::Tensor<T> class_slot;   // [1, d], used by every kind
  ad::Tensor<T> table;        // [R, d], trainable kind only
  LinearParams<T> coordinate; // 2 -> d, coordinate kind only

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".class_slot", class_slot, ParamGroup::no_decay);
    if (table.defined()) f(prefix + ".table", table, ParamGroup::no_decay);
    if (coordinate.weight.defined()) coordinate.visit(prefix + ".coordinate", ParamGroup::vit, f);
  }
};

/// Transformer trunk shared by the holistic and part variants.
template <typename T>
struct VitParams {
  LinearParams<T> patch_embed;  // [C*K*K, d]
  ad::Tensor<T> class_token;    // [1, d]
  PositionalParams<T> position;
  std::vector<TransformerLayerParams<T>> layers;
  LayerNormParams<T> final_norm;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    patch_embed.visit(prefix + ".patch_embed", ParamGroup::vit, f);
    f(prefix + ".class_token", class_token, ParamGroup::no_decay);
    position.visit(prefix + ".pos", f);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].visit(prefix + ".layers." + std::to_string(i), f);
    }
    final_norm.visit(prefix + ".final_norm", f);
  }
};

/// Truncated-normal-ish init helper shared by all modules: draws N(0, std)
/// and clips at two standard deviations.
template <typename T>
ad::Tensor<T> init_normal(const ad::Shape& shape, double stddev, std::mt19937_64& rng);

template <typename T>
LinearParams<T> init_linear(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng);

template <typename T>
LayerNormParams<T> init_layer_norm(std::size_t dim);

template <typename T>
VitParams<T> init_vit(const ModelConfig& cfg, std::mt19937_64& rng);

/// Counts scalars reachable through visit().
template <typename Params>
std::size_t parameter_count(Params& params) {
  std::size_t n = 0;
  params.visit("", [&](const std::string&, auto& t, ParamGroup) { n += t.numel(); });
  return n;
}

}  // namespace partvit
