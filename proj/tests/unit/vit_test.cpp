#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "partvit/autodiff/gradcheck.hpp"
#include "partvit/autodiff/ops.hpp"
#include "partvit/errors.hpp"
#include "partvit/vit/vit.hpp"
#include "test_util.hpp"

using namespace partvit;
using ad::Tensor64;
using partvit::testing::max_abs_diff;
using partvit::testing::random_tensor;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.preset = "micro";
  cfg.image_height = cfg.image_width = 8;
  cfg.channels = 2;
  cfg.num_patches = 4;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.mlp_dim = 12;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.head_dim = 3;
  cfg.stochastic_depth_prob = 0.0;
  return cfg;
}

// Plain-loop reference for one attention head on a single sequence.
// x: [T, d], weights [d, dh], biases [dh].
std::vector<double> naive_head(const std::vector<double>& x, std::size_t t, std::size_t d,
                               const LinearParams<double>& q, const LinearParams<double>& k,
                               const LinearParams<double>& v, std::size_t col0, std::size_t dh) {
  auto project = [&](const LinearParams<double>& p) {
    const std::size_t out = p.weight.size(1);
    std::vector<double> r(t * dh);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < dh; ++j) {
        double s = p.bias.at(col0 + j);
        for (std::size_t c = 0; c < d; ++c) s += x[i * d + c] * p.weight.at(c * out + col0 + j);
        r[i * dh + j] = s;
      }
    }
    return r;
  };
  const auto qq = project(q), kk = project(k), vv = project(v);
  std::vector<double> out(t * dh, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> a(t);
    double mx = -1e300;
    for (std::size_t j = 0; j < t; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < dh; ++c) s += qq[i * dh + c] * kk[j * dh + c];
      a[j] = s / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, a[j]);
    }
    double z = 0;
    for (auto& e : a) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < t; ++j) {
      for (std::size_t c = 0; c < dh; ++c) out[i * dh + c] += a[j] / z * vv[j * dh + c];
    }
  }
  return out;
}

}  // namespace

TEST(ModelConfig, TinyPresetIsValid) {
  auto cfg = make_preset("fvit-tiny");
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.grid_side(), 7u);
  EXPECT_EQ(cfg.patch_dim(), 192u);
}

TEST(ModelConfig, PatchCountDeterminesPatchSize) {
  auto b = make_preset("fvit-b");
  EXPECT_EQ(with_patch_count(b, 196).patch_size, 8u);
  EXPECT_EQ(with_patch_count(b, 49).patch_size, 16u);
  EXPECT_EQ(with_patch_count(b, 16).patch_size, 28u);
  EXPECT_THROW(with_patch_count(b, 50), ConfigError);
}

TEST(ModelConfig, RejectsInconsistentSettings) {
  auto cfg = make_preset("fvit-tiny");
  cfg.patch_size = 7;
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = make_preset("fvit-tiny");
  cfg.stochastic_depth_prob = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = make_preset("fvit-tiny");
  cfg.bottleneck_violation = true;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.variant = Variant::part;
  EXPECT_NO_THROW(cfg.validate());
  cfg.pos_encoding = PosEncoding::cosine;
  EXPECT_THROW(cfg.validate(), ConfigError);

  EXPECT_THROW(make_preset("fvit-huge"), ConfigError);
  EXPECT_THROW(parse_pos_encoding("learned"), ConfigError);
}

TEST(ModelConfig, PartVariantAllowsAnyPatchSize) {
  auto cfg = make_preset("fvit-tiny");
  cfg.variant = Variant::part;
  cfg.patch_size = 11;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(ParameterCount, AnalyticMatchesConstructedForEveryVariant) {
  for (auto variant : {Variant::holistic}) {
    for (auto pos : {PosEncoding::trainable, PosEncoding::cosine, PosEncoding::coordinate}) {
      auto cfg = make_preset("fvit-tiny");
      cfg.variant = variant;
      cfg.pos_encoding = pos;
      std::mt19937_64 rng(1);
      auto params = init_vit<float>(cfg, rng);
      EXPECT_EQ(parameter_count(params), count_backbone_parameters(cfg)) << to_string(pos);
    }
  }
}

TEST(ParameterCount, BasePresetConstructedCount) {
  const auto cfg = make_preset("fvit-b");
  EXPECT_EQ(cfg.head_dim, 69u);
  std::mt19937_64 rng(1);
  auto params = init_vit<float>(cfg, rng);
  const auto n = parameter_count(params);
  EXPECT_EQ(n, count_backbone_parameters(cfg));
  EXPECT_GE(n, 60'000'000u);
  EXPECT_LE(n, 67'000'000u);
}

TEST(Patches, RegularTilingMatchesLoops) {
  const std::size_t b = 2, c = 3, h = 8, w = 12, k = 4;
  auto img = random_tensor<double>({b, c, h, w}, 5);
  auto patches = extract_regular_patches(img, k);
  ASSERT_EQ(patches.shape(), (ad::Shape{b, 6, c * k * k}));
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t py = 0; py < h / k; ++py) {
      for (std::size_t px = 0; px < w / k; ++px) {
        const std::size_t s = py * (w / k) + px;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double expect = img.at(((n * c + ch) * h + py * k + ky) * w + px * k + kx);
              const double got = patches.at((n * 6 + s) * c * k * k + (ch * k + ky) * k + kx);
              ASSERT_EQ(got, expect);
            }
          }
        }
      }
    }
  }
  EXPECT_THROW(extract_regular_patches(img, 5), DimensionError);
}

TEST(Patches, GridCentersRowMajor) {
  const auto c = regular_grid_centers(2);
  ASSERT_EQ(c.size(), 4u);
  EXPECT_DOUBLE_EQ(c[1][0], 0.75);
  EXPECT_DOUBLE_EQ(c[1][1], 0.25);
  EXPECT_DOUBLE_EQ(c[2][0], 0.25);
  EXPECT_DOUBLE_EQ(c[2][1], 0.75);
}

TEST(Attention, SingleHeadMatchesThreeLoopEvaluation) {
  const std::size_t t = 5, d = 8, dh = 4;
  std::mt19937_64 rng(3);
  auto q = init_linear<double>(d, dh, 0.5, rng);
  auto k = init_linear<double>(d, dh, 0.5, rng);
  auto v = init_linear<double>(d, dh, 0.5, rng);
  q.bias = random_tensor<double>({dh}, 11);
  auto x = random_tensor<double>({1, t, d}, 4);
  auto out = self_attention_head(x, q, k, v);
  const std::vector<double> xv(x.data().begin(), x.data().end());
  const auto ref = naive_head(xv, t, d, q, k, v, 0, dh);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.at(i), ref[i], 1e-6);
}

TEST(Attention, IdenticalTokensGiveIdenticalOutputs) {
  const std::size_t t = 6, d = 8;
  std::mt19937_64 rng(5);
  auto q = init_linear<double>(d, 4, 0.5, rng);
  auto k = init_linear<double>(d, 4, 0.5, rng);
  auto v = init_linear<double>(d, 4, 0.5, rng);
  auto row = random_tensor<double>({1, 1, d}, 6);
  auto x = ad::broadcast_to(row, {1, t, d});
  auto out = self_attention_head(x, q, k, v);
  for (std::size_t i = 1; i < t; ++i) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(i * 4 + c), out.at(c), 1e-12);
  }
}

TEST(Attention, MultiHeadIsConcatOfHeadsThenProjection) {
  const std::size_t b = 2, t = 5, d = 8, h = 3, dh = 2;  // h*dh != d on purpose
  std::mt19937_64 rng(9);
  AttentionParams<double> p;
  p.query = init_linear<double>(d, h * dh, 0.5, rng);
  p.key = init_linear<double>(d, h * dh, 0.5, rng);
  p.value = init_linear<double>(d, h * dh, 0.5, rng);
  p.out = init_linear<double>(h * dh, d, 0.5, rng);
  p.out.bias = random_tensor<double>({d}, 12);
  auto x = random_tensor<double>({b, t, d}, 10);
  AttentionCapture cap;
  auto y = multi_head_attention(x, p, h, dh, &cap);
  ASSERT_EQ(y.shape(), (ad::Shape{b, t, d}));
  ASSERT_EQ(cap.probs.size(), 1u);
  EXPECT_EQ(cap.shapes[0], (ad::Shape{b, h, t, t}));

  for (std::size_t n = 0; n < b; ++n) {
    const std::vector<double> xv(x.data().begin() + n * t * d, x.data().begin() + (n + 1) * t * d);
    std::vector<double> concat(t * h * dh);
    for (std::size_t head = 0; head < h; ++head) {
      const auto r = naive_head(xv, t, d, p.query, p.key, p.value, head * dh, dh);
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t c = 0; c < dh; ++c) concat[i * h * dh + head * dh + c] = r[i * dh + c];
      }
    }
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t o = 0; o < d; ++o) {
        double s = p.out.bias.at(o);
        for (std::size_t c = 0; c < h * dh; ++c) s += concat[i * h * dh + c] * p.out.weight.at(c * d + o);
        EXPECT_NEAR(y.at((n * t + i) * d + o), s, 1e-9);
      }
    }
  }
  for (std::size_t row = 0; row < b * h * t; ++row) {
    double s = 0;
    for (std::size_t j = 0; j < t; ++j) s += cap.probs[0][row * t + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(StochasticDepth, IdentityOutsideTraining) {
  auto x = random_tensor<double>({4, 3, 2}, 1);
  std::mt19937_64 rng(0);
  EXPECT_EQ(max_abs_diff(stochastic_depth(x, 0.5, false, &rng), x), 0.0);
  EXPECT_EQ(max_abs_diff(stochastic_depth(x, 0.0, true, &rng), x), 0.0);
  EXPECT_THROW(stochastic_depth(x, 1.0, true, &rng), ConfigError);
  EXPECT_THROW(stochastic_depth(x, 0.3, true, nullptr), ContractError);
}

TEST(StochasticDepth, PerSampleMaskPreservesExpectation) {
  const std::size_t b = 4000;
  auto x = Tensor64::full({b, 2}, 1.0);
  std::mt19937_64 rng(42);
  const double p = 0.25;
  auto y = stochastic_depth(x, p, true, &rng);
  double mean = 0;
  for (std::size_t n = 0; n < b; ++n) {
    const double a = y.at(2 * n), c = y.at(2 * n + 1);
    EXPECT_EQ(a, c);  // whole sample kept or dropped together
    EXPECT_TRUE(a == 0.0 || std::abs(a - 1.0 / (1.0 - p)) < 1e-12);
    mean += a;
  }
  EXPECT_NEAR(mean / b, 1.0, 0.05);
}

TEST(Transformer, ZeroBranchesMakeLayerIdentity) {
  auto cfg = micro_config();
  std::mt19937_64 rng(1);
  auto params = init_vit<double>(cfg, rng);
  auto& layer = params.layers[0];
  for (auto* t : {&layer.attention.out.weight, &layer.mlp_down.weight}) {
    auto m = t->mutable_data();
    std::fill(m.begin(), m.end(), 0.0);
  }
  auto z = random_tensor<double>({2, 5, cfg.embed_dim}, 3);
  EXPECT_LT(max_abs_diff(transformer_layer(z, layer, cfg, {}), z), 1e-15);
}

TEST(Transformer, ClassTokenIsInvariantToPatchOrder) {
  auto cfg = micro_config();
  std::mt19937_64 rng(2);
  auto params = init_vit<double>(cfg, rng);
  const std::size_t t = cfg.num_tokens(), d = cfg.embed_dim;
  auto tokens = random_tensor<double>({1, t, d}, 8);
  std::vector<double> perm(tokens.data().begin(), tokens.data().end());
  // swap tokens 1 and 3 (class token stays first)
  for (std::size_t c = 0; c < d; ++c) std::swap(perm[1 * d + c], perm[3 * d + c]);
  auto permuted = Tensor64::from_vector({1, t, d}, perm);
  auto a = encode_tokens(tokens, params, cfg, {});
  auto b = encode_tokens(permuted, params, cfg, {});
  EXPECT_LT(max_abs_diff(a, b), 1e-12);
}

TEST(Positional, CosineTableFollowsSinCosPairs) {
  const auto table = cosine_position_table(10, 6);
  EXPECT_DOUBLE_EQ(table[0], 0.0);
  EXPECT_DOUBLE_EQ(table[1], 1.0);
  const double angle = 3.0 / std::pow(10000.0, 2.0 / 6.0);
  EXPECT_NEAR(table[3 * 6 + 2], std::sin(angle), 1e-15);
  EXPECT_NEAR(table[3 * 6 + 3], std::cos(angle), 1e-15);
  for (double v : table) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Positional, EveryKindGivesClassSlotPlusPatchRows) {
  for (auto pos : {PosEncoding::trainable, PosEncoding::cosine, PosEncoding::coordinate}) {
    auto cfg = micro_config();
    cfg.pos_encoding = pos;
    std::mt19937_64 rng(4);
    auto params = init_vit<double>(cfg, rng);
    auto terms = positional_terms(params.position, cfg, 3);
    ASSERT_EQ(terms.shape(), (ad::Shape{3, cfg.num_tokens(), cfg.embed_dim}));
    for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
      EXPECT_EQ(terms.at(c), params.position.class_slot.at(c));
    }
  }
}

TEST(Positional, CoordinateKindUsesGivenLandmarks) {
  auto cfg = micro_config();
  cfg.pos_encoding = PosEncoding::coordinate;
  std::mt19937_64 rng(4);
  auto params = init_vit<double>(cfg, rng);
  std::vector<double> grid;
  for (auto c : regular_grid_centers(2)) grid.insert(grid.end(), {c[0], c[1]});
  auto lm = Tensor64::from_vector({1, 4, 2}, grid);
  EXPECT_LT(max_abs_diff(positional_terms(params.position, cfg, 1, lm),
                         positional_terms(params.position, cfg, 1)), 1e-15);
  EXPECT_THROW(positional_terms(params.position, cfg, 2, lm), DimensionError);
}

TEST(Forward, OutputShapeAndBatchIndependence) {
  auto cfg = micro_config();
  std::mt19937_64 rng(6);
  auto params = init_vit<double>(cfg, rng);
  auto img = random_tensor<double>({3, 2, 8, 8}, 7, 0.0, 1.0);
  auto emb = fvit_forward(img, params, cfg);
  ASSERT_EQ(emb.shape(), (ad::Shape{3, cfg.embed_dim}));
  for (std::size_t n = 0; n < 3; ++n) {
    auto one = fvit_forward(ad::slice(img, 0, n, n + 1), params, cfg);
    for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
      EXPECT_NEAR(one.at(c), emb.at(n * cfg.embed_dim + c), 1e-12);
    }
  }
  EXPECT_THROW(fvit_forward(random_tensor<double>({1, 3, 8, 8}, 1), params, cfg), DimensionError);
}

TEST(Forward, CaptureRecordsEveryLayer) {
  auto cfg = micro_config();
  std::mt19937_64 rng(6);
  auto params = init_vit<double>(cfg, rng);
  AttentionCapture cap;
  ForwardOptions opts;
  opts.capture = &cap;
  fvit_forward(random_tensor<double>({1, 2, 8, 8}, 7), params, cfg, opts);
  ASSERT_EQ(cap.probs.size(), cfg.depth);
  EXPECT_EQ(cap.shapes[1], (ad::Shape{1, cfg.heads, cfg.num_tokens(), cfg.num_tokens()}));
}

TEST(Forward, GradientsMatchFiniteDifferences) {
  for (auto pos : {PosEncoding::trainable, PosEncoding::cosine, PosEncoding::coordinate}) {
    auto cfg = micro_config();
    cfg.pos_encoding = pos;
    std::mt19937_64 rng(8);
    auto params = init_vit<double>(cfg, rng);
    // Larger weights than the 0.02 init so every path carries signal.
    params.visit("vit", [&](const std::string&, Tensor64& t, ParamGroup) {
      for (auto& v : t.mutable_data()) v *= 5.0;
    });
    auto img = random_tensor<double>({2, 2, 8, 8}, 9, 0.0, 1.0);
    auto probe = random_tensor<double>({2, cfg.embed_dim}, 10);
    auto loss = [&] { return ad::sum(ad::mul(fvit_forward(img, params, cfg), probe)); };
    std::vector<ad::NamedParam> named;
    params.visit("vit", [&](const std::string& n, Tensor64& t, ParamGroup) { named.push_back({n, t}); });
    ad::GradCheckOptions opt;
    opt.max_samples = 6;
    const auto report = ad::gradient_check_params(loss, named, 1e-6, 1e-5, opt);
    EXPECT_TRUE(report.passed) << to_string(pos) << " worst " << report.worst()->tensor << " "
                               << report.max_rel_error << " a=" << report.worst()->analytic << " n=" << report.worst()->numeric;
  }
}
