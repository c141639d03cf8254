#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>

#include "partvit/autodiff/tensor.hpp"
#include "partvit/vit/params.hpp"

namespace partvit {

enum class ScaleMode {
  constant,        // fixed b (default 64)
  embedding_norm,  // b = ||z|| per sample, treated as a constant
};

std::string_view to_string(ScaleMode m);
ScaleMode parse_scale_mode(std::string_view s);

struct CosFaceConfig {
  double margin = 0.35;
  double scale = 64.0;
  ScaleMode scale_mode = ScaleMode::constant;

  void validate() const;
};

template <typename T>
struct CosFaceHead {
  ad::Tensor<T> weight;  // [d, classes]; columns are class centres

  std::size_t num_classes() const { return weight.size(1); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight, ParamGroup::vit);
  }
};

template <typename T>
CosFaceHead<T> init_cosface_head(std::size_t embed_dim, std::size_t num_classes, std::mt19937_64& rng);

/// Row-wise unit-norm embedding (the verification feature).
template <typename T>
ad::Tensor<T> l2_normalize_embedding(const ad::Tensor<T>& embedding);

/// cos(theta) between normalized embeddings [B, d] and normalized class
/// centres: [B, classes].
template <typename T>
ad::Tensor<T> cosine_logits(const ad::Tensor<T>& embedding, const CosFaceHead<T>& head);

/// Mean over the batch of -log softmax(b (cos - m 1[j = y]))_y.
template <typename T>
ad::Tensor<T> cosface_loss(const ad::Tensor<T>& embedding, std::span<const std::size_t> labels,
                           const CosFaceHead<T>& head, const CosFaceConfig& cfg);

/// Mixup form: lambda * L(labels_a) + (1 - lambda) * L(labels_b).
template <typename T>
ad::Tensor<T> cosface_loss_mixup(const ad::Tensor<T>& embedding, std::span<const std::size_t> labels_a,
                                 std::span<const std::size_t> labels_b, double lambda,
                                 const CosFaceHead<T>& head, const CosFaceConfig& cfg);

}  // namespace partvit
