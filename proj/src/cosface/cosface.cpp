#include "partvit/cosface/cosface.hpp"

#include <cmath>

#include "partvit/autodiff/ops.hpp"
#include "partvit/errors.hpp"

namespace partvit {

using ad::Tensor;

std::string_view to_string(ScaleMode m) { return m == ScaleMode::constant ? "constant" : "embedding_norm"; }

ScaleMode parse_scale_mode(std::string_view s) {
  if (s == "constant") return ScaleMode::constant;
  if (s == "embedding_norm") return ScaleMode::embedding_norm;
  throw ConfigError("unknown scale mode '" + std::string(s) + "' (expected constant|embedding_norm)");
}

void CosFaceConfig::validate() const {
  if (!(margin >= 0.0 && margin < 1.0)) throw ConfigError("cosface margin must lie in [0, 1)");
  if (scale_mode == ScaleMode::constant && !(scale > 0.0)) throw ConfigError("cosface scale must be positive");
}

template <typename T>
CosFaceHead<T> init_cosface_head(std::size_t embed_dim, std::size_t num_classes, std::mt19937_64& rng) {
  if (num_classes < 2) throw ConfigError("cosface needs at least two classes");
  return {init_normal<T>({embed_dim, num_classes}, 0.02, rng)};
}

template <typename T>
Tensor<T> l2_normalize_embedding(const Tensor<T>& embedding) {
  return ad::l2_normalize(embedding);
}

template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& embedding, const CosFaceHead<T>& head) {
  if (embedding.dim() != 2 || embedding.size(1) != head.weight.size(0)) {
    throw DimensionError("embedding " + ad::to_string(embedding.shape()) + " does not match head " +
                         ad::to_string(head.weight.shape()));
  }
  auto centres = ad::transpose(ad::l2_normalize(ad::transpose(head.weight, 0, 1)), 0, 1);
  return ad::matmul(ad::l2_normalize(embedding), centres);
}

namespace {

template <typename T>
Tensor<T> loss_from_cosines(const Tensor<T>& cos, const Tensor<T>& embedding,
                            std::span<const std::size_t> labels, const CosFaceConfig& cfg) {
  const std::size_t b = cos.size(0), classes = cos.size(1);
  if (labels.size() != b) {
    throw DimensionError("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(b));
  }
  std::vector<T> onehot(b * classes, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " out of range for " +
                          std::to_string(classes) + " classes");
    }
    onehot[i * classes + labels[i]] = T(1);
  }
  auto target = Tensor<T>::from_vector({b, classes}, onehot);
  auto shifted = ad::sub(cos, ad::scale(target, static_cast<T>(cfg.margin)));
  Tensor<T> logits;
  if (cfg.scale_mode == ScaleMode::constant) {
    logits = ad::scale(shifted, static_cast<T>(cfg.scale));
  } else {
    const auto z = embedding.data();
    const std::size_t d = embedding.size(1);
    std::vector<T> factors(b * classes);
    for (std::size_t i = 0; i < b; ++i) {
      T ss(0);
      for (std::size_t j = 0; j < d; ++j) ss += z[i * d + j] * z[i * d + j];
      std::fill_n(factors.begin() + i * classes, classes, std::sqrt(ss));
    }
    logits = ad::mul(shifted, Tensor<T>::from_vector({b, classes}, std::move(factors)));
  }
  auto picked = ad::sum(ad::mul(ad::log_softmax(logits, 1), target));
  return ad::scale(picked, static_cast<T>(-1.0 / static_cast<double>(b)));
}

}  // namespace

template <typename T>
Tensor<T> cosface_loss(const Tensor<T>& embedding, std::span<const std::size_t> labels,
                       const CosFaceHead<T>& head, const CosFaceConfig& cfg) {
  return loss_from_cosines(cosine_logits(embedding, head), embedding, labels, cfg);
}

template <typename T>
Tensor<T> cosface_loss_mixup(const Tensor<T>& embedding, std::span<const std::size_t> labels_a,
                             std::span<const std::size_t> labels_b, double lambda,
                             const CosFaceHead<T>& head, const CosFaceConfig& cfg) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("mixup lambda must lie in [0, 1]");
  auto cos = cosine_logits(embedding, head);
  auto la = loss_from_cosines(cos, embedding, labels_a, cfg);
  if (lambda == 1.0) return la;
  auto lb = loss_from_cosines(cos, embedding, labels_b, cfg);
  if (lambda == 0.0) return lb;
  return ad::add(ad::scale(la, static_cast<T>(lambda)), ad::scale(lb, static_cast<T>(1.0 - lambda)));
}

#define PARTVIT_INSTANTIATE(T)                                                                         \
  template CosFaceHead<T> init_cosface_head<T>(std::size_t, std::size_t, std::mt19937_64&);            \
  template Tensor<T> l2_normalize_embedding<T>(const Tensor<T>&);                                      \
  template Tensor<T> cosine_logits<T>(const Tensor<T>&, const CosFaceHead<T>&);                        \
  template Tensor<T> cosface_loss<T>(const Tensor<T>&, std::span<const std::size_t>,                   \
                                     const CosFaceHead<T>&, const CosFaceConfig&);                     \
  template Tensor<T> cosface_loss_mixup<T>(const Tensor<T>&, std::span<const std::size_t>,             \
                                           std::span<const std::size_t>, double, const CosFaceHead<T>&, \
                                           const CosFaceConfig&);

PARTVIT_INSTANTIATE(float)
PARTVIT_INSTANTIATE(double)

}  // namespace partvit
