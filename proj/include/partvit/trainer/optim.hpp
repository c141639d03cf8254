#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "partvit/autodiff/tensor.hpp"
#include "partvit/vit/params.hpp"

namespace partvit {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay_vit = 0.1;
  double weight_decay_landmark = 0.05;
  /// Learning-rate multiplier for the landmark CNN group.

  double weight_decay(ParamGroup g) const;
  void validate() const;
};

template <typename T>
struct ParamSlot {
  std::string name;
  ad::Tensor<T> tensor;
  ParamGroup group = ParamGroup::vit;
};

/// Collects every parameter a model visits, in visit order.
template <typename T, typename Model>
std::vector<ParamSlot<T>> collect_params(Model& model) {
  std::vector<ParamSlot<T>> out;
  model.visit([&](const std::string& name, ad::Tensor<T>& t, ParamGroup g) {
    out.push_back({name, t, g});
  });
  return out;
}

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// Decoupled weight decay Adam. Moments are kept in double.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<ParamSlot<T>> params, AdamWConfig cfg = {});

  /// p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps). Parameters without
  /// a gradient see a zero gradient.
  void step(double lr);
  void zero_grad();

  /// L2 norm of the current gradients of one group.
  double grad_norm(ParamGroup g) const;

  const std::vector<ParamSlot<T>>& params() const { return params_; }
  const AdamWConfig& config() const { return cfg_; }
  const OptimizerState& state() const { return state_; }
  /// Replaces the moments; shapes must match the parameters.
  void load_state(OptimizerState state);

 private:
  std::vector<ParamSlot<T>> params_;
  AdamWConfig cfg_;
  OptimizerState state_;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

struct Schedule {
  double base_lr = 3e-4;
  double min_lr = 1e-6;
  std::size_t warmup_epochs = 5;
  std::size_t total_epochs = 30;
  std::size_t steps_per_epoch = 1;

  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
  void validate() const;
};

/// Linear ramp from 0 over the warm-up steps, then half-cosine from base_lr
/// to min_lr, reaching min_lr on the last step.
double cosine_warmup_lr(std::size_t step, const Schedule& sched);

}  // namespace partvit
