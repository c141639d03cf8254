#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "partvit/autodiff/gradcheck.hpp"
#include "partvit/autodiff/ops.hpp"
#include "partvit/errors.hpp"
#include "partvit/part/part.hpp"
#include "test_util.hpp"

using namespace partvit;
using ad::Tensor64;
using ad::Tensor32;
using partvit::testing::max_abs_diff;
using partvit::testing::random_tensor;

namespace {

// Tent-kernel formulation of bilinear interpolation with border clamping,
// written independently of the sampler's floor/fraction bookkeeping.
double tent_sample(const std::vector<double>& plane, std::size_t h, std::size_t w, double px, double py) {
  px = std::clamp(px, 0.5, static_cast<double>(w) - 0.5);
  py = std::clamp(py, 0.5, static_cast<double>(h) - 0.5);
  double v = 0;
  for (std::size_t i = 0; i < h; ++i) {
    const double wy = std::max(0.0, 1.0 - std::abs(py - (static_cast<double>(i) + 0.5)));
    if (wy == 0) continue;
    for (std::size_t j = 0; j < w; ++j) {
      const double wx = std::max(0.0, 1.0 - std::abs(px - (static_cast<double>(j) + 0.5)));
      v += wx * wy * plane[i * w + j];
    }
  }
  return v;
}

ModelConfig tiny_part(PosEncoding pos = PosEncoding::trainable) {
  auto cfg = make_preset("fvit-tiny");
  cfg.variant = Variant::part;
  cfg.pos_encoding = pos;
  cfg.stochastic_depth_prob = 0.0;
  return cfg;
}

ModelConfig micro_part() {
  ModelConfig cfg;
  cfg.image_height = cfg.image_width = 12;
  cfg.channels = 2;
  cfg.num_patches = 4;
  cfg.patch_size = 5;
  cfg.embed_dim = 8;
  cfg.mlp_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.variant = Variant::part;
  cfg.stochastic_depth_prob = 0.0;
  cfg.landmark.channels = {3, 4};
  return cfg;
}

}  // namespace

TEST(Sampler, RegularGridReproducesTiling) {
  const auto cfg = make_preset("fvit-tiny");
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto img = random_tensor<float>({1, 3, 56, 56}, seed, 0.0f, 1.0f);
    auto lm = regular_grid_landmarks<float>(1, cfg.grid_side());
    auto sampled = ad::reshape(grid_sample_patches(img, lm, cfg.patch_size), {1, 49, cfg.patch_dim()});
    EXPECT_LT(max_abs_diff(sampled, extract_regular_patches(img, cfg.patch_size)), 1e-5);
  }
}

TEST(Sampler, MatchesTentKernelOracle) {
  const std::size_t c = 2, h = 9, w = 11, k = 4, r = 6;
  auto img = random_tensor<double>({1, c, h, w}, 1);
  auto lm = random_tensor<double>({1, r, 2}, 2, -0.2, 1.2);  // some patches cross the border
  auto out = grid_sample_patches(img, lm, k);
  const std::vector<double> pix(img.data().begin(), img.data().end());
  for (std::size_t p = 0; p < r; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::vector<double> plane(pix.begin() + ch * h * w, pix.begin() + (ch + 1) * h * w);
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double x = lm.at(2 * p) * w + kx - 1.5;
          const double y = lm.at(2 * p + 1) * h + ky - 1.5;
          EXPECT_NEAR(out.at(((p * c + ch) * k + ky) * k + kx), tent_sample(plane, h, w, x, y), 1e-12);
        }
      }
    }
  }
}

TEST(Sampler, IntegerShiftOfLandmarkTracksShiftedImage) {
  const std::size_t h = 20, w = 20, k = 5, shift = 3;
  auto img = random_tensor<double>({1, 1, h, w}, 4);
  std::vector<double> moved(h * w, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = shift; j < w; ++j) moved[i * w + j] = img.at(i * w + j - shift);
  auto img2 = Tensor64::from_vector({1, 1, h, w}, moved);
  auto lm = Tensor64::from_vector({1, 2, 2}, {0.4, 0.5, 0.37, 0.61});
  auto lm2 = Tensor64::from_vector({1, 2, 2}, {0.4 + 3.0 / w, 0.5, 0.37 + 3.0 / w, 0.61});
  EXPECT_LT(max_abs_diff(grid_sample_patches(img, lm, k), grid_sample_patches(img2, lm2, k)), 1e-12);
}

TEST(Sampler, GradientsReachImageAndLandmarks) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto img = random_tensor<double>({2, 2, 7, 9}, seed);
    auto lm = random_tensor<double>({2, 3, 2}, seed + 100, 0.05, 0.95);
    auto weights = random_tensor<double>({2, 3, 2, 3, 3}, seed + 200);
    auto through_image = [&](const Tensor64& x) { return ad::sum(ad::mul(grid_sample_patches(x, lm, 3), weights)); };
    auto through_lm = [&](const Tensor64& l) { return ad::sum(ad::mul(grid_sample_patches(img, l, 3), weights)); };
    EXPECT_TRUE(ad::gradient_check<double>(through_image, img, 1e-6, 1e-5).passed);
    const auto rep = ad::gradient_check<double>(through_lm, lm, 1e-7, 1e-5);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  }
}

TEST(Sampler, ClampedReadsCarryNoCoordinateGradient) {
  auto img = random_tensor<double>({1, 1, 6, 6}, 3);
  auto lm = Tensor64::from_vector({1, 1, 2}, {-2.0, -2.0}, true);
  ad::sum(grid_sample_patches(img, lm, 3)).backward();
  EXPECT_EQ(lm.grad()[0], 0.0);
  EXPECT_EQ(lm.grad()[1], 0.0);
}

TEST(Sampler, RejectsNonFiniteLandmarks) {
  auto img = random_tensor<double>({1, 1, 6, 6}, 3);
  auto lm = Tensor64::from_vector({1, 1, 2}, {0.5, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(grid_sample_patches(img, lm, 3), NumericError);
  EXPECT_THROW(grid_sample_patches(img, Tensor64::zeros({2, 1, 2}), 3), DimensionError);
}

TEST(LandmarkNet, InitialLandmarksSitNearRegularGrid) {
  auto cfg = tiny_part();
  auto model = init_backbone<float>(cfg, 3);
  auto img = random_tensor<float>({2, 3, 56, 56}, 5, 0.0f, 1.0f);
  auto out = landmark_net_forward(img, model.landmark, cfg);
  ASSERT_EQ(out.landmarks.shape(), (ad::Shape{2, 49, 2}));
  ASSERT_EQ(out.features.shape(), (ad::Shape{2, 128}));
  EXPECT_LT(max_abs_diff(out.landmarks, regular_grid_landmarks<float>(2, 7)), 0.02);
}

TEST(LandmarkNet, ZeroHeadPutsEveryLandmarkAtCentre) {
  auto cfg = tiny_part();
  auto model = init_backbone<double>(cfg, 3);
  for (auto* t : {&model.landmark.head.weight, &model.landmark.head.bias}) {
    auto d = t->mutable_data();
    std::fill(d.begin(), d.end(), 0.0);
  }
  auto out = landmark_net_forward(random_tensor<double>({1, 3, 56, 56}, 5, 0.0, 1.0), model.landmark, cfg);
  for (double v : out.landmarks.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(LandmarkNet, OutputsStayInsideUnitSquare) {
  auto cfg = tiny_part();
  auto model = init_backbone<float>(cfg, 11);
  // Blow up the head so the sigmoid saturates.
  for (auto& v : model.landmark.head.weight.mutable_data()) v *= 5000.0f;
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto out = landmark_net_forward(random_tensor<float>({2, 3, 56, 56}, s, 0.0f, 1.0f), model.landmark, cfg);
    for (float v : out.landmarks.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(PartModel, RegularLandmarksMatchHolisticForward) {
  const auto cfg = tiny_part();
  auto model = init_backbone<float>(cfg, 7);
  auto holistic_cfg = cfg;
  holistic_cfg.variant = Variant::holistic;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto img = random_tensor<float>({1, 3, 56, 56}, 100 + seed, 0.0f, 1.0f);
    auto part = part_fvit_forward_at(img, regular_grid_landmarks<float>(1, 7), model, {});
    auto hol = fvit_forward(img, model.vit, holistic_cfg);
    EXPECT_LT(max_abs_diff(part, hol), 1e-5);
  }
}

TEST(PartModel, ParameterCountMatchesAnalytic) {
  for (bool leak : {false, true}) {
    auto cfg = tiny_part();
    cfg.bottleneck_violation = leak;
    auto model = init_backbone<float>(cfg, 1);
    EXPECT_EQ(parameter_count(model), count_backbone_parameters(cfg));
  }
}

TEST(PartModel, LandmarkNetworkReceivesGradient) {
  auto cfg = tiny_part();
  auto model = init_backbone<float>(cfg, 9);
  auto img = random_tensor<float>({2, 3, 56, 56}, 1, 0.0f, 1.0f);
  auto probe = random_tensor<float>({2, 64}, 2);
  auto out = part_fvit_forward(img, model, {});
  ad::sum(ad::mul(out.embedding, probe)).backward();
  model.landmark.visit("landmark", [](const std::string& name, Tensor32& t, ParamGroup) {
    double norm = 0;
    for (float g : t.grad()) norm += double(g) * g;
    EXPECT_GT(norm, 0.0) << name;
  });
}

TEST(PartModel, EndToEndGradientsMatchFiniteDifferences) {
  for (bool leak : {false, true}) {
    auto cfg = micro_part();
    cfg.bottleneck_violation = leak;
    auto model = init_backbone<double>(cfg, 21);
    model.vit.visit("vit", [](const std::string&, Tensor64& t, ParamGroup) {
      for (auto& v : t.mutable_data()) v *= 5.0;
    });
    // Spread landmarks so the sampled patches differ.
    for (auto& v : model.landmark.head.weight.mutable_data()) v *= 100.0;
    if (leak) {
      for (auto& v : model.bottleneck.weight.mutable_data()) v *= 10.0;
    }
    auto img = random_tensor<double>({2, 2, 12, 12}, 3, 0.0, 1.0);
    auto probe = random_tensor<double>({2, 8}, 4);
    auto loss = [&] { return ad::sum(ad::mul(part_fvit_forward(img, model, {}).embedding, probe)); };
    std::vector<ad::NamedParam> named;
    model.visit([&](const std::string& n, Tensor64& t, ParamGroup) { named.push_back({n, t}); });
    ad::GradCheckOptions opt;
    opt.max_samples = 5;
    const auto rep = ad::gradient_check_params(loss, named, 1e-6, 1e-4, opt);
    EXPECT_TRUE(rep.passed) << "leak=" << leak << " worst " << rep.worst()->tensor << " " << rep.max_rel_error
                            << " a=" << rep.worst()->analytic << " n=" << rep.worst()->numeric;
  }
}

TEST(Bottleneck, ZeroProjectorContributesNothing) {
  auto feats = random_tensor<double>({2, 5}, 1);
  auto table = random_tensor<double>({3, 4}, 2);
  LinearParams<double> proj{Tensor64::zeros({9, 4}), Tensor64::zeros({4})};
  auto term = bottleneck_violation_term(feats, table, proj);
  ASSERT_EQ(term.shape(), (ad::Shape{2, 3, 4}));
  for (double v : term.data()) EXPECT_EQ(v, 0.0);
}

TEST(Bottleneck, TermDependsOnImageFeatures) {
  auto table = random_tensor<double>({3, 4}, 2);
  std::mt19937_64 rng(0);
  auto proj = init_linear<double>(9, 4, 0.5, rng);
  auto a = bottleneck_violation_term(random_tensor<double>({1, 5}, 1), table, proj);
  auto b = bottleneck_violation_term(random_tensor<double>({1, 5}, 9), table, proj);
  EXPECT_GT(max_abs_diff(a, b), 1e-3);
}

TEST(Sampler, SinglePixelPatchAtImageCentreAveragesFourPixels) {
  auto img = Tensor64::from_vector({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto lm = Tensor64::from_vector({1, 1, 2}, {0.5, 0.5});
  EXPECT_DOUBLE_EQ(grid_sample_patches(img, lm, 1).item(), 2.5);
}

TEST(Sampler, PixelAlignedOddPatchIsExactCrop) {
  const std::size_t h = 8, w = 10, k = 3;
  auto img = random_tensor<double>({1, 1, h, w}, 8);
  // Centre on pixel (row 4, col 6): its centre sits at (6.5, 4.5).
  auto lm = Tensor64::from_vector({1, 1, 2}, {6.5 / w, 4.5 / h});
  auto out = grid_sample_patches(img, lm, k);
  for (std::size_t ky = 0; ky < k; ++ky) {
    for (std::size_t kx = 0; kx < k; ++kx) {
      EXPECT_EQ(out.at(ky * k + kx), img.at((3 + ky) * w + 5 + kx));
    }
  }
}

TEST(LandmarkNet, ImageGradientMatchesFiniteDifferences) {
  const auto cfg = micro_part();
  auto model = init_backbone<double>(cfg, 4);
  auto img = random_tensor<double>({1, 2, 12, 12}, 9, 0.0, 1.0);
  auto weights = random_tensor<double>({1, 4, 2}, 10);
  auto f = [&](const Tensor64& x) {
    return ad::sum(ad::mul(landmark_net_forward(x, model.landmark, cfg).landmarks, weights));
  };
  const auto rep = ad::gradient_check<double>(f, img, 1e-6, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(LandmarkNet, RejectsMismatchedGeometry) {
  auto cfg = micro_part();
  auto model = init_backbone<double>(cfg, 4);
  auto img = random_tensor<double>({1, 2, 12, 12}, 9);
  auto other = cfg;
  other.num_patches = 9;
  EXPECT_THROW(landmark_net_forward(img, model.landmark, other), ConfigError);
  EXPECT_THROW(landmark_net_forward(random_tensor<double>({1, 3, 12, 12}, 9), model.landmark, cfg), DimensionError);
}
