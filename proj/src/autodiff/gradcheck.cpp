#include "partvit/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "partvit/errors.hpp"

namespace partvit::ad {

const GradCheckEntry* GradCheckReport::worst() const {
  if (entries.empty()) return nullptr;
  return &*std::max_element(entries.begin(), entries.end(),
                            [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
}

namespace {

template <typename T>
T scalar_of(const Tensor<T>& t) {
  if (t.numel() != 1) throw ContractError("gradient_check: function must be scalar-valued");
  return t.data()[0];
}

std::vector<std::size_t> pick_indices(std::size_t n, const GradCheckOptions& opt, std::uint64_t salt) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (opt.max_samples == 0 || opt.max_samples >= n) return idx;
  std::mt19937_64 rng(opt.sample_seed * 1000003u + salt);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opt.max_samples);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void record(GradCheckReport& report, std::string name, std::size_t index, double analytic,
            double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  const double rel = std::abs(analytic - numeric) / denom;
  report.entries.push_back({std::move(name), index, analytic, numeric, rel});
  report.max_rel_error = std::max(report.max_rel_error, rel);
}

}  // namespace

template <typename T>
GradCheckReport gradient_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                               const Tensor<T>& x, double eps, double tol,
                               const GradCheckOptions& options) {
  auto input = Tensor<T>::from_vector(x.shape(), std::vector<T>(x.data().begin(), x.data().end()),
                                      true);
  const auto out = f(input);
  {
    NoGradGuard guard;
    const T again = scalar_of(f(input));
    const T first = scalar_of(out);
    if (std::memcmp(&again, &first, sizeof(T)) != 0) {
      throw DeterminismError("gradient_check: two forward passes at the same point differ");
    }
  }
  out.backward();
  std::vector<T> analytic(input.numel(), T(0));
  if (input.has_grad()) std::copy(input.grad().begin(), input.grad().end(), analytic.begin());

  GradCheckReport report;
  report.tolerance = tol;
  auto values = input.mutable_data();
  NoGradGuard guard;
  for (auto i : pick_indices(values.size(), options, 0)) {
    const T orig = values[i];
    values[i] = orig + static_cast<T>(eps);
    const double plus = static_cast<double>(scalar_of(f(input)));
    values[i] = orig - static_cast<T>(eps);
    const double minus = static_cast<double>(scalar_of(f(input)));
    values[i] = orig;
    record(report, {}, i, static_cast<double>(analytic[i]), (plus - minus) / (2.0 * eps),
           options.abs_floor);
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

GradCheckReport gradient_check_params(const std::function<Tensor<double>()>& loss,
                                      std::vector<NamedParam> params, double eps, double tol,
                                      const GradCheckOptions& options) {
  for (auto& p : params) {
    if (!p.tensor.is_leaf() || !p.tensor.requires_grad()) {
      throw ContractError("gradient_check_params: '" + p.name + "' is not a trainable leaf");
    }
    p.tensor.zero_grad();
  }
  const auto out = loss();
  {
    NoGradGuard guard;
    const double again = scalar_of(loss());
    const double first = scalar_of(out);
    if (std::memcmp(&again, &first, sizeof(double)) != 0) {
      throw DeterminismError("gradient_check: two forward passes at the same point differ");
    }
  }
  out.backward();

  GradCheckReport report;
  report.tolerance = tol;
  NoGradGuard guard;
  std::uint64_t salt = 0;
  for (auto& p : params) {
    std::vector<double> analytic(p.tensor.numel(), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());
    auto values = p.tensor.mutable_data();
    for (auto i : pick_indices(values.size(), options, ++salt)) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double plus = scalar_of(loss());
      values[i] = orig - eps;
      const double minus = scalar_of(loss());
      values[i] = orig;
      record(report, p.name, i, analytic[i], (plus - minus) / (2.0 * eps), options.abs_floor);
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

template GradCheckReport gradient_check<float>(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                               const Tensor<float>&, double, double,
                                               const GradCheckOptions&);
template GradCheckReport gradient_check<double>(
    const std::function<Tensor<double>(const Tensor<double>&)>&, const Tensor<double>&, double,
    double, const GradCheckOptions&);

}  // namespace partvit::ad
