#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "partvit/autodiff/tensor.hpp"

namespace partvit::ad {

struct GradCheckEntry {
  std::string tensor;  // empty for single-input checks
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;

  const GradCheckEntry* worst() const;
};

struct GradCheckOptions {
  /// Relative error is |a - n| / max(|a|, |n|, abs_floor), so gradients
  /// smaller than the floor are compared in absolute terms.
  double abs_floor = 1e-3;
  /// Elements checked per tensor; 0 checks every element.
  std::size_t max_samples = 0;
  std::uint64_t sample_seed = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` must be deterministic: it is evaluated twice at `x`
/// before checking and a mismatch raises DeterminismError.
template <typename T>
GradCheckReport gradient_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                               const Tensor<T>& x, double eps, double tol,
                               const GradCheckOptions& options = {});

struct NamedParam {
  std::string name;
  Tensor<double> tensor;
};

/// Same check over several leaf tensors that `loss` closes over. The
/// tensors are perturbed in place and restored.
GradCheckReport gradient_check_params(const std::function<Tensor<double>()>& loss,
                                      std::vector<NamedParam> params, double eps, double tol,
                                      const GradCheckOptions& options = {});

}  // namespace partvit::ad
