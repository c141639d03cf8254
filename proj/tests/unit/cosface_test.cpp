#include <gtest/gtest.h>

#include <cmath>

#include "partvit/autodiff/gradcheck.hpp"
#include "partvit/autodiff/ops.hpp"
#include "partvit/cosface/cosface.hpp"
#include "partvit/errors.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace partvit;
using ad::Tensor64;
using partvit::testing::random_tensor;
using partvit::testing::reference_ce;

namespace {

struct Fixture {
  Tensor64 z = random_tensor<double>({6, 5}, 1);
  CosFaceHead<double> head{random_tensor<double>({5, 4}, 2)};
  std::vector<std::size_t> labels{0, 1, 2, 3, 1, 2};
};

double loss_value(const Tensor64& z, const CosFaceHead<double>& head, const std::vector<std::size_t>& labels,
                  double m, double b = 64.0) {
  CosFaceConfig cfg;
  cfg.margin = m;
  cfg.scale = b;
  return cosface_loss(z, labels, head, cfg).item();
}

}  // namespace

TEST(Normalize, KnownRowAndIdempotence) {
  auto z = Tensor64::from_vector({1, 2}, {3, 4});
  auto n = l2_normalize_embedding(z);
  EXPECT_NEAR(n.at(0), 0.6, 1e-15);
  EXPECT_NEAR(n.at(1), 0.8, 1e-15);
  auto nn = l2_normalize_embedding(n);
  EXPECT_NEAR(nn.at(0), 0.6, 1e-7);
  EXPECT_THROW(l2_normalize_embedding(Tensor64::zeros({1, 3})), NumericError);
}

TEST(Normalize, GradientMatchesFiniteDifferences) {
  auto z = random_tensor<double>({3, 4}, 7);
  auto w = random_tensor<double>({3, 4}, 8);
  auto f = [&](const Tensor64& x) { return ad::sum(ad::mul(l2_normalize_embedding(x), w)); };
  EXPECT_TRUE(ad::gradient_check<double>(f, z, 1e-6, 1e-5).passed);
}

TEST(CosFace, TwoClassClosedForm) {
  auto z = Tensor64::from_vector({1, 2}, {2.0, 0.0});
  CosFaceHead<double> head{Tensor64::from_vector({2, 2}, {1, 0, 0, 1})};
  const std::vector<std::size_t> y{0};
  EXPECT_NEAR(loss_value(z, head, y, 0.0, 1.0), std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(loss_value(z, head, y, 0.0, 1.0), 0.31326, 1e-5);
}

TEST(CosFace, ZeroMarginEqualsCrossEntropy) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto z = random_tensor<double>({6, 5}, seed);
    CosFaceHead<double> head{random_tensor<double>({5, 4}, seed + 50)};
    const std::vector<std::size_t> y{0, 1, 2, 3, 1, 2};
    for (double b : {1.0, 16.0, 64.0}) {
      EXPECT_NEAR(loss_value(z, head, y, 0.0, b), reference_ce(z, head.weight, y, b), 1e-6);
    }
  }
}

TEST(CosFace, StrictlyIncreasingInMargin) {
  Fixture f;
  double prev = loss_value(f.z, f.head, f.labels, 0.0);
  for (int i = 1; i <= 5; ++i) {
    const double cur = loss_value(f.z, f.head, f.labels, 0.1 * i);
    EXPECT_GT(cur, prev);
    prev = cur;
  }
}

TEST(CosFace, InvariantToPositiveRescaling) {
  Fixture f;
  const double base = loss_value(f.z, f.head, f.labels, 0.35);
  for (double s : {1e-3, 0.5, 7.0, 1e3}) {
    CosFaceHead<double> scaled_head{ad::scale(f.head.weight, s)};
    EXPECT_NEAR(loss_value(f.z, scaled_head, f.labels, 0.35), base, 1e-6);
    EXPECT_NEAR(loss_value(ad::scale(f.z, s), f.head, f.labels, 0.35), base, 1e-6);
  }
  // Only one column rescaled: still normalized away.
  auto w = f.head.weight.clone();
  for (std::size_t k = 0; k < 5; ++k) w.mutable_data()[k * 4 + 2] *= 9.0;
  EXPECT_NEAR(loss_value(f.z, CosFaceHead<double>{w}, f.labels, 0.35), base, 1e-6);
}

TEST(CosFace, EmbeddingNormScaleIsDetached) {
  Fixture f;
  CosFaceConfig cfg;
  cfg.scale_mode = ScaleMode::embedding_norm;
  // With b = ||z|| frozen, the gradient equals that of the constant-b loss
  // evaluated with the same per-sample b.
  auto z = Tensor64::from_vector({1, 5}, std::vector<double>(f.z.data().begin(), f.z.data().begin() + 5), true);
  const std::vector<std::size_t> y{2};
  cosface_loss(z, y, f.head, cfg).backward();
  double norm = 0;
  for (double v : z.data()) norm += v * v;
  norm = std::sqrt(norm);
  auto z2 = Tensor64::from_vector({1, 5}, std::vector<double>(z.data().begin(), z.data().end()), true);
  CosFaceConfig fixed;
  fixed.scale = norm;
  cosface_loss(z2, y, f.head, fixed).backward();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(z.grad()[i], z2.grad()[i], 1e-12);
}

TEST(CosFace, GradientsMatchFiniteDifferences) {
  Fixture f;
  CosFaceConfig cfg;
  cfg.scale = 4.0;
  auto head_w = f.head.weight.clone();
  head_w.set_requires_grad(true);
  auto z = f.z.clone();
  z.set_requires_grad(true);
  auto loss = [&] { return cosface_loss(z, f.labels, CosFaceHead<double>{head_w}, cfg); };
  const auto rep = ad::gradient_check_params(loss, {{"z", z}, {"w", head_w}}, 1e-6, 1e-5);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(CosFace, MixupIsLambdaWeightedSum) {
  Fixture f;
  CosFaceConfig cfg;
  const std::vector<std::size_t> other{3, 3, 0, 1, 0, 0};
  const double la = loss_value(f.z, f.head, f.labels, 0.35);
  const double lb = loss_value(f.z, f.head, other, 0.35);
  EXPECT_NEAR(cosface_loss_mixup(f.z, f.labels, other, 0.3, f.head, cfg).item(), 0.3 * la + 0.7 * lb, 1e-10);
  EXPECT_DOUBLE_EQ(cosface_loss_mixup(f.z, f.labels, other, 1.0, f.head, cfg).item(), la);
  EXPECT_THROW(cosface_loss_mixup(f.z, f.labels, other, 1.5, f.head, cfg), ContractError);
}

TEST(CosFace, ContractErrors) {
  Fixture f;
  CosFaceConfig cfg;
  const std::vector<std::size_t> bad{0, 1, 2, 4, 1, 2};
  EXPECT_THROW(cosface_loss(f.z, bad, f.head, cfg), ContractError);
  const std::vector<std::size_t> short_labels{0};
  EXPECT_THROW(cosface_loss(f.z, short_labels, f.head, cfg), DimensionError);
  cfg.margin = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
