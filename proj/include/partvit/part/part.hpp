#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "partvit/autodiff/tensor.hpp"
#include "partvit/vit/config.hpp"
#include "partvit/vit/params.hpp"
#include "partvit/vit/vit.hpp"

namespace partvit {

template <typename T>
struct ConvParams {
  ad::Tensor<T> weight;  // [out, in, k, k]
  ad::Tensor<T> bias;    // [out]

  template <typename F>
  void visit(const std::string& prefix, ParamGroup group, F&& f) {
    f(prefix + ".weight", weight, group);
    f(prefix + ".bias", bias, group);
  }
};

template <typename T>
struct LandmarkNetParams {
  std::vector<ConvParams<T>> stages;
  LinearParams<T> head;  // [feature_dim, 2R], sigmoid applied after

  bool defined() const { return head.weight.defined(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      stages[i].visit(prefix + ".conv" + std::to_string(i), ParamGroup::landmark, f);
    }
    head.visit(prefix + ".head", ParamGroup::landmark, f);
  }
};

template <typename T>
struct LandmarkOutput {
  ad::Tensor<T> landmarks;  // [B, R, 2], (x, y) in [0, 1]
  ad::Tensor<T> features;   // [B, F], pooled penultimate activations
};

/// Conv stages use He-normal weights. The head starts with small weights and
/// a bias equal to logit of the regular-grid centres, so the first forward
/// pass samples (almost) the holistic tiling.
template <typename T>
LandmarkNetParams<T> init_landmark_net(const ModelConfig& cfg, std::mt19937_64& rng);

template <typename T>
LandmarkOutput<T> landmark_net_forward(const ad::Tensor<T>& image, const LandmarkNetParams<T>& params,
                                       const ModelConfig& cfg);

/// Differentiable bilinear patch extraction around normalized landmarks.
///
/// image [B, C, H, W], landmarks [B, R, 2] -> [B, R, C, K, K]. Pixel (i, j)
/// has its centre at (j + 0.5, i + 0.5); landmark (x, y) sits at (x W, y H)
/// and patch sample (ky, kx) is read at offset (kx - (K-1)/2, ky - (K-1)/2)
/// from it. Reads outside the image clamp to the border pixels. Gradients
/// reach both the image and the landmark coordinates.
template <typename T>
ad::Tensor<T> grid_sample_patches(const ad::Tensor<T>& image, const ad::Tensor<T>& landmarks,
                                  std::size_t patch_size);

/// Regular-grid centres as a [B, R, 2] constant.
template <typename T>
ad::Tensor<T> regular_grid_landmarks(std::size_t batch, std::size_t grid_side);

/// Deliberately leaks the landmark CNN's pooled feature into the positional
/// term: Linear(concat(feature, table row)) for every patch. [B, R, d].
template <typename T>
ad::Tensor<T> bottleneck_violation_term(const ad::Tensor<T>& features, const ad::Tensor<T>& table,
                                        const LinearParams<T>& projector);

/// Full backbone for either variant. Unused members stay undefined.
template <typename T>
struct Backbone {
  ModelConfig cfg;
  VitParams<T> vit;
  LandmarkNetParams<T> landmark;
  LinearParams<T> bottleneck;

  template <typename F>
  void visit(F&& f) {
    vit.visit("vit", f);
    if (landmark.defined()) landmark.visit("landmark", f);
    if (bottleneck.weight.defined()) bottleneck.visit("bottleneck", ParamGroup::vit, f);
  }
  template <typename F>
  void visit(const std::string&, F&& f) {
    visit(std::forward<F>(f));
  }
};

template <typename T>
Backbone<T> init_backbone(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
struct BackboneOutput {
  ad::Tensor<T> embedding;  // [B, d]
  ad::Tensor<T> landmarks;  // [B, R, 2]; regular grid for the holistic variant
  ad::Tensor<T> features;   // [B, F]; part variant only
};

/// Part pipeline on given landmarks: sample, embed, add positions, encode.
/// `features` is only read when the config asks for the bottleneck leak.
template <typename T>
ad::Tensor<T> part_fvit_forward_at(const ad::Tensor<T>& image, const ad::Tensor<T>& landmarks,
                                   const Backbone<T>& model, const ForwardOptions& opts,
                                   const ad::Tensor<T>& features = {});

/// Landmark CNN followed by part_fvit_forward_at.
template <typename T>
BackboneOutput<T> part_fvit_forward(const ad::Tensor<T>& image, const Backbone<T>& model,
                                    const ForwardOptions& opts = {});

/// Dispatches on the configured variant.
template <typename T>
BackboneOutput<T> backbone_forward(const ad::Tensor<T>& image, const Backbone<T>& model,
                                   const ForwardOptions& opts = {});

}  // namespace partvit
