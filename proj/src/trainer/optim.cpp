#include "partvit/trainer/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "partvit/errors.hpp"

namespace partvit {

double AdamWConfig::weight_decay(ParamGroup g) const {
  switch (g) {
    case ParamGroup::vit: return weight_decay_vit;
    case ParamGroup::landmark: return weight_decay_landmark;
    case ParamGroup::no_decay: return 0.0;
  }
  return 0.0;
}

void AdamWConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(eps >= 0.0)) throw ConfigError("optimizer eps must be >= 0");
  if (!(weight_decay_vit >= 0.0) || !(weight_decay_landmark >= 0.0)) {
    throw ConfigError("weight decay must be >= 0");
  }
}

template <typename T>
AdamW<T>::AdamW(std::vector<ParamSlot<T>> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const auto& p : params_) {
    if (!p.tensor.defined()) throw ContractError("optimizer parameter '" + p.name + "' is undefined");
    state_.first_moment.emplace_back(p.tensor.numel(), 0.0);
    state_.second_moment.emplace_back(p.tensor.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const std::uint64_t t = state_.step + 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto& m = state_.first_moment[k];
    auto& v = state_.second_moment[k];
    if (m.size() != p.tensor.numel()) {
      throw ContractError("optimizer moment size mismatch for '" + p.name + "'");
    }
    const double decay = lr * cfg_.weight_decay(p.group);
    auto values = p.tensor.mutable_data();
    std::span<const T> grad;
    if (p.tensor.has_grad()) grad = p.tensor.grad();
    if (!grad.empty() && grad.size() != values.size()) {
      throw ContractError("gradient size mismatch for '" + p.name + "'");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      double x = static_cast<double>(values[i]);
      x -= decay * x;
      if (mhat != 0.0) x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      values[i] = static_cast<T>(x);
    }
  }
  state_.step = t;
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
double AdamW<T>::grad_norm(ParamGroup g) const {
  double s = 0.0;
  for (const auto& p : params_) {
    if (p.group != g || !p.tensor.has_grad()) continue;
    for (T x : p.tensor.grad()) s += static_cast<double>(x) * static_cast<double>(x);
  }
  return std::sqrt(s);
}

template <typename T>
void AdamW<T>::load_state(OptimizerState state) {
  if (state.first_moment.size() != params_.size() || state.second_moment.size() != params_.size()) {
    throw ContractError("optimizer state has " + std::to_string(state.first_moment.size()) +
                        " entries, model has " + std::to_string(params_.size()));
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (state.first_moment[k].size() != params_[k].tensor.numel() ||
        state.second_moment[k].size() != params_[k].tensor.numel()) {
      throw ContractError("optimizer state shape mismatch for '" + params_[k].name + "'");
    }
  }
  state_ = std::move(state);
}

template class AdamW<float>;
template class AdamW<double>;

void Schedule::validate() const {
  if (total_epochs == 0) throw ConfigError("schedule.total_epochs must be positive");
  if (warmup_epochs >= total_epochs) throw ConfigError("schedule.warmup_epochs must be < total_epochs");
  if (steps_per_epoch == 0) throw ConfigError("schedule.steps_per_epoch must be positive");
  if (!(base_lr >= 0.0) || !(min_lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
}

double cosine_warmup_lr(std::size_t step, const Schedule& sched) {
  const std::size_t warm = sched.warmup_steps();
  if (step < warm) {
    return sched.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  }
  const std::size_t total = sched.total_steps();
  if (total <= warm + 1) return sched.min_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(total - 1 - warm));
  return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace partvit
