// Acceptance suite: one PASS/FAIL line per criterion, exit code 0 iff all pass.
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "op_cases.hpp"
#include "oracles.hpp"
#include "partvit/autodiff/gradcheck.hpp"
#include "partvit/common/rng.hpp"
#include "partvit/cosface/cosface.hpp"
#include "partvit/evalsuite/metrics.hpp"
#include "partvit/evalsuite/records.hpp"
#include "partvit/part/part.hpp"
#include "partvit/trainer/config.hpp"
#include "partvit/trainer/trainer.hpp"
#include "test_util.hpp"

using namespace partvit;
using ad::Tensor32;
using ad::Tensor64;
using partvit::testing::max_abs_diff;
using partvit::testing::random_tensor;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

ModelConfig tiny_part() {
  auto cfg = make_preset("fvit-tiny");
  cfg.variant = Variant::part;
  cfg.stochastic_depth_prob = 0.0;
  return cfg;
}

// Shared between the smoke, forward-error and ablation criteria.
struct SmokeRun {
  TrainConfig cfg;
  Dataset data;
  FaceModel model;
  double train_seconds = 0.0;
  double train_accuracy = 0.0;
  std::vector<EpochMetrics> history;
};

struct Context {
  fs::path smoke_config;
  fs::path out;
  std::optional<SmokeRun> smoke;

  TrainConfig load_smoke_config() const {
    std::ifstream in(smoke_config);
    if (!in) throw IoError("cannot read " + smoke_config.string());
    return train_config_from_json(nlohmann::json::parse(in));
  }

  SmokeRun& smoke_run() {
    if (!smoke) {
      const auto cfg = load_smoke_config();
      auto data = synth_generate(SyntheticFaceSpec{});
      FaceModel model = init_face_model(cfg, data.num_identities);
      TrainOptions opts;
      opts.metrics_csv = out / "ablation_trainable.csv";
      opts.heldout = data.subset(data.val);
      const auto t0 = Clock::now();
      auto result = train_loop(model, cfg, data.num_identities, data.subset(data.train), opts);
      const double secs = seconds_since(t0);
      const double acc = evaluate_accuracy(model, data.subset(data.train));
      smoke.emplace(SmokeRun{cfg, std::move(data), std::move(model), secs, acc, std::move(result.history)});
    }
    return *smoke;
  }
};

Outcome gradient_suite(Context&) {
  const auto t0 = Clock::now();
  std::size_t cases = 0;
  double worst_op = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (const auto& c : partvit::testing::op_gradient_cases(seed * 101)) {
      const auto rep = ad::gradient_check<double>(c.f, c.input, 1e-5, 1e-5);
      if (!rep.passed) return {false, fmt::format("op {} seed {}: rel err {:.3g}", c.name, seed, rep.max_rel_error)};
      worst_op = std::max(worst_op, rep.max_rel_error);
      ++cases;
    }
    auto img = random_tensor<double>({2, 2, 7, 9}, seed);
    auto lm = random_tensor<double>({2, 3, 2}, seed + 100, 0.05, 0.95);
    auto weights = random_tensor<double>({2, 3, 2, 3, 3}, seed + 200);
    const std::vector<std::pair<std::function<Tensor64(const Tensor64&)>, Tensor64>> sampler{
        {[&](const Tensor64& x) { return ad::sum(ad::mul(grid_sample_patches(x, lm, 3), weights)); }, img},
        {[&](const Tensor64& l) { return ad::sum(ad::mul(grid_sample_patches(img, l, 3), weights)); }, lm}};
    for (const auto& [f, x] : sampler) {
      const auto rep = ad::gradient_check<double>(f, x, 1e-7, 1e-5);
      if (!rep.passed) return {false, fmt::format("grid_sample seed {}: rel err {:.3g}", seed, rep.max_rel_error)};
      worst_op = std::max(worst_op, rep.max_rel_error);
      ++cases;
    }
  }

  const auto cfg = tiny_part();
  auto model = init_backbone<double>(cfg, 3);
  auto img = random_tensor<double>({1, 3, 56, 56}, 4, 0.0, 1.0);
  auto probe = random_tensor<double>({1, cfg.embed_dim}, 5);
  auto loss = [&] { return ad::sum(ad::mul(backbone_forward(img, model, {}).embedding, probe)); };
  std::vector<ad::NamedParam> named;
  model.visit([&](const std::string& n, Tensor64& t, ParamGroup) { named.push_back({n, t}); });
  ad::GradCheckOptions opt;
  opt.max_samples = 4;
  const auto rep = ad::gradient_check_params(loss, named, 1e-6, 1e-3, opt);
  const double secs = seconds_since(t0);
  std::string detail = fmt::format("{} op checks, worst {:.2e}; part-fViT-tiny {} tensors, worst {:.2e}; {:.0f} s",
                                   cases, worst_op, named.size(), rep.max_rel_error, secs);
  if (!rep.passed) detail += " worst tensor " + rep.worst()->tensor;
  return {rep.passed && secs < 300.0, detail};
}

Outcome regular_grid_equivalence(Context&) {
  const auto cfg = tiny_part();
  auto model = init_backbone<float>(cfg, 7);
  auto holistic = cfg;
  holistic.variant = Variant::holistic;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto img = random_tensor<float>({1, 3, 56, 56}, 1000 + seed, 0.0f, 1.0f);
    auto part = part_fvit_forward_at(img, regular_grid_landmarks<float>(1, cfg.grid_side()), model, {});
    worst = std::max(worst, max_abs_diff(part, fvit_forward(img, model.vit, holistic)));
  }
  return {worst <= 1e-5, fmt::format("max |part - holistic| = {:.2e} over 20 images", worst)};
}

Outcome end_to_end_trainability(Context&) {
  TrainConfig cfg;
  cfg.model = tiny_part();
  cfg.schedule.total_epochs = 1;
  cfg.schedule.warmup_epochs = 0;
  cfg.batch_size = 8;
  auto rng = make_rng({77});
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < 8; ++i) {
    Image img(3, 56, 56);
    for (auto& v : img.pixels) v = u(rng);
    samples.push_back({std::move(img), i % 4, "random/" + std::to_string(i)});
  }
  FaceModel model = init_face_model(cfg, 4);
  double landmark_norm = -1.0, vit_norm = -1.0;
  TrainOptions opts;
  opts.on_step = [&](std::size_t, const AdamW<float>& opt) {
    if (landmark_norm < 0.0) {
      landmark_norm = opt.grad_norm(ParamGroup::landmark);
      vit_norm = opt.grad_norm(ParamGroup::vit);
    }
  };
  train_loop(model, cfg, 4, samples, opts);
  return {landmark_norm > 0.0 && std::isfinite(landmark_norm),
          fmt::format("landmark-CNN grad norm {:.3e}, transformer grad norm {:.3e}", landmark_norm, vit_norm)};
}

Outcome convergence_smoke(Context& ctx) {
  auto& run = ctx.smoke_run();
  const auto val = run.data.subset(run.data.val);
  std::unordered_map<std::string, std::vector<float>> emb;
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  for (auto& r : embed_extract(run.model.backbone, val)) {
    ids.push_back(r.id);
    labels.push_back(r.label);
    emb.emplace(r.id, std::move(r.embedding));
  }
  const auto pairs = make_verification_pairs(ids, labels, 1000, 10, run.cfg.seed);
  const double verif = verification_accuracy_kfold(pairs, emb, 10);
  // Held-out loss, 3-epoch moving average over the first 5 epochs.
  bool falling = true;
  for (std::size_t e = 3; e < 5 && e < run.history.size(); ++e) {
    const double prev = run.history[e - 3].heldout_loss + run.history[e - 2].heldout_loss + run.history[e - 1].heldout_loss;
    const double cur = run.history[e - 2].heldout_loss + run.history[e - 1].heldout_loss + run.history[e].heldout_loss;
    falling = falling && cur < prev;
  }
  const bool pass = run.train_accuracy > 0.95 && verif > 0.90 && run.train_seconds < 1200.0 &&
                    run.cfg.schedule.total_epochs <= 30;
  return {pass, fmt::format("train acc {:.3f}, held-out verification {:.3f}, {} epochs in {:.0f} s; held-out loss "
                            "{} over the first 5 epochs",
                            run.train_accuracy, verif, run.cfg.schedule.total_epochs, run.train_seconds,
                            falling ? "falls" : "does not fall")};
}

Outcome parameter_parity(Context&) {
  const auto cfg = make_preset("fvit-b");
  std::mt19937_64 rng(1);
  auto params = init_vit<float>(cfg, rng);
  const auto n = parameter_count(params);
  return {n >= 60'000'000 && n <= 67'000'000 && n == count_backbone_parameters(cfg),
          fmt::format("fViT-B backbone has {} parameters", n)};
}

Outcome patch_geometry(Context&) {
  const auto b = make_preset("fvit-b");
  const auto fine = with_patch_count(b, 196), coarse = with_patch_count(b, 16);
  const bool pass = b.image_height == 112 && b.image_width == 112 && fine.patch_size == 8 && coarse.patch_size == 28 &&
                    fine.grid_side() * fine.patch_size == 112 && coarse.grid_side() * coarse.patch_size == 112;
  return {pass, fmt::format("at {}x{}: R=196 -> K={}, R=16 -> K={}", b.image_height, b.image_width, fine.patch_size,
                            coarse.patch_size)};
}

Outcome metric_oracles(Context&) {
  auto rng = make_rng({4242});
  std::uniform_int_distribution<int> count(1, 12), level(0, 20);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::size_t tar_cases = 0, rank_cases = 0, overlap_cases = 0;
  for (int trial = 0; trial < 200; ++trial) {
    ScoreSet s;
    const bool ties = trial % 2 == 0;
    auto draw = [&] { return ties ? level(rng) / 10.0 - 1.0 : u(rng); };
    for (int i = count(rng); i > 0; --i) s.genuine.push_back(draw());
    for (int i = count(rng); i > 0; --i) s.impostor.push_back(draw());
    for (double far : {0.0, 0.1, 0.25, 0.5, 1.0}) {
      if (tar_at_far(s, far) != partvit::testing::brute_tar(s, far)) {
        return {false, fmt::format("tar_at_far differs on trial {} far {}", trial, far)};
      }
    }
    ++tar_cases;
  }
  std::normal_distribution<float> g(0.f, 1.f);
  auto rows = [&](std::size_t n, std::size_t d) {
    std::vector<std::vector<float>> out(n, std::vector<float>(d));
    for (auto& r : out) {
      for (auto& v : r) v = g(rng);
    }
    return out;
  };
  for (int trial = 0; trial < 150; ++trial) {
    const auto probes = rows(15, 6), gallery = rows(40, 6);
    if (rank1_assign(probes, gallery) != partvit::testing::brute_rank1(probes, gallery)) {
      return {false, fmt::format("rank1 differs on trial {}", trial)};
    }
    ++rank_cases;
  }
  std::uniform_int_distribution<int> pos(0, 600);
  const double k = 8.0, h = 0.05;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::array<double, 2>> c(8);
    for (auto& p : c) p = {pos(rng) * h, pos(rng) * h};
    const auto got = overlap_rate(c, k);
    const auto want = partvit::testing::raster_overlap(c, k, h);
    worst = std::max({worst, std::abs(got.mean - want.mean), std::abs(got.variance - want.variance)});
    ++overlap_cases;
  }
  return {worst < 1e-3, fmt::format("tar_at_far {} sets x 5 targets exact, rank1 {} sets exact, overlap {} sets "
                                    "within {:.1e}",
                                    tar_cases, rank_cases, overlap_cases, worst)};
}

Outcome cosface_algebra(Context&) {
  const std::vector<std::size_t> y{0, 1, 2, 3, 1, 2};
  auto loss = [&](const Tensor64& z, const Tensor64& w, double m) {
    CosFaceConfig c;
    c.margin = m;
    return cosface_loss(z, y, CosFaceHead<double>{w}, c).item();
  };
  double ce_err = 0.0, scale_err = 0.0;
  bool monotone = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto z = random_tensor<double>({6, 5}, seed);
    auto w = random_tensor<double>({5, 4}, seed + 50);
    ce_err = std::max(ce_err, std::abs(loss(z, w, 0.0) - partvit::testing::reference_ce(z, w, y, 64.0)));
    double prev = loss(z, w, 0.0);
    for (int i = 1; i <= 8; ++i) {
      const double cur = loss(z, w, 0.05 * i);
      monotone = monotone && cur > prev;
      prev = cur;
    }
    const double base = loss(z, w, 0.35);
    auto rng = make_rng({seed, 9});
    std::uniform_real_distribution<double> s(0.01, 100.0);
    auto w2 = w.clone();
    for (std::size_t j = 0; j < 4; ++j) {
      const double f = s(rng);
      for (std::size_t kk = 0; kk < 5; ++kk) w2.mutable_data()[kk * 4 + j] *= f;
    }
    auto z2 = z.clone();
    for (std::size_t i = 0; i < 6; ++i) {
      const double f = s(rng);
      for (std::size_t kk = 0; kk < 5; ++kk) z2.mutable_data()[i * 5 + kk] *= f;
    }
    scale_err = std::max(scale_err, std::abs(loss(z2, w2, 0.35) - base));
  }
  return {ce_err <= 1e-6 && scale_err <= 1e-6 && monotone,
          fmt::format("m=0 vs cross-entropy {:.1e}, rescaling {:.1e}, monotone in m: {}", ce_err, scale_err,
                      monotone ? "yes" : "no")};
}

LandmarkEvalSet eval_set(const Dataset& data, const std::vector<Points>& predicted) {
  LandmarkEvalSet s;
  s.predicted = predicted;
  for (const auto& p : data.parts) s.truth.emplace_back(p.begin(), p.end());
  s.train = data.train;
  s.test = data.val;
  return s;
}

Outcome forward_error_protocol(Context& ctx) {
  auto& run = ctx.smoke_run();
  const auto& data = run.data;
  std::vector<Points> affine;
  for (const auto& parts : data.parts) {
    Points p;
    for (const auto& q : parts) p.push_back({0.8 * q[0] - 0.3 * q[1] + 0.1, 0.2 * q[0] + 1.1 * q[1] - 0.05});
    affine.push_back(p);
  }
  const double affine_err = forward_error(eval_set(data, affine)).error_percent;

  std::vector<Points> trained;
  for (auto& r : landmark_extract(run.model.backbone, data.samples)) trained.push_back(std::move(r.landmarks));
  const double trained_err = forward_error(eval_set(data, trained)).error_percent;

  auto rng = make_rng({run.cfg.seed, 31});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Points> noise(trained.size(), Points(trained.front().size()));
  for (auto& p : noise) {
    for (auto& q : p) q = {u(rng), u(rng)};
  }
  const double noise_err = forward_error(eval_set(data, noise)).error_percent;
  const double ratio = noise_err / trained_err;
  return {affine_err < 1e-4 && ratio >= 2.0,
          fmt::format("affine-of-truth {:.2e}%, trained {:.2f}%, random {:.2f}%, ratio {:.2f}", affine_err,
                      trained_err, noise_err, ratio)};
}

Outcome ablation_harness(Context& ctx) {
  auto& run = ctx.smoke_run();
  struct Variant_ {
    std::string name;
    std::function<void(TrainConfig&)> apply;
  };
  const std::vector<Variant_> variants{
      {"cosine", [](TrainConfig& c) { c.model.pos_encoding = PosEncoding::cosine; }},
      {"coordinate", [](TrainConfig& c) { c.model.pos_encoding = PosEncoding::coordinate; }},
      {"bottleneck", [](TrainConfig& c) { c.model.bottleneck_violation = true; }},
  };
  std::vector<std::string> summary{fmt::format("trainable {:.3f}", run.train_accuracy)};
  const auto train = run.data.subset(run.data.train);
  for (const auto& v : variants) {
    TrainConfig cfg = run.cfg;
    v.apply(cfg);
    FaceModel model = init_face_model(cfg, run.data.num_identities);
    TrainOptions opts;
    opts.metrics_csv = ctx.out / ("ablation_" + v.name + ".csv");
    try {
      train_loop(model, cfg, run.data.num_identities, train, opts);
    } catch (const TrainingDiverged& e) {
      return {false, v.name + " diverged: " + e.diagnostics};
    }
    summary.push_back(fmt::format("{} {:.3f}", v.name, evaluate_accuracy(model, train)));
  }
  std::string header;
  for (const auto* name : {"trainable", "cosine", "coordinate", "bottleneck"}) {
    std::ifstream in(ctx.out / fmt::format("ablation_{}.csv", name));
    std::string first, line;
    std::getline(in, first);
    if (header.empty()) header = first;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      const auto loss = std::stod(line.substr(line.rfind(',', line.rfind(',') - 1) + 1));
      if (!std::isfinite(loss)) return {false, fmt::format("{} logged a non-finite loss", name)};
      ++rows;
    }
    if (first != header || rows != run.cfg.schedule.total_epochs) {
      return {false, fmt::format("{} CSV has header '{}' and {} rows", name, first, rows)};
    }
  }
  std::string joined;
  for (const auto& s : summary) joined += (joined.empty() ? "" : ", ") + s;
  return {true, "train acc " + joined + "; CSVs in " + ctx.out.string()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  Context ctx;
  ctx.smoke_config = PARTVIT_SMOKE_CONFIG;
  ctx.out = "acceptance_out";
  std::vector<int> only;
  app.add_option("--config", ctx.smoke_config, "Smoke-test training config");
  app.add_option("--out", ctx.out, "Directory for ablation CSVs");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::err);
  fs::create_directories(ctx.out);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"gradient suite", gradient_suite},
      {"regular-grid equivalence", regular_grid_equivalence},
      {"end-to-end trainability", end_to_end_trainability},
      {"convergence smoke test", convergence_smoke},
      {"parameter parity", parameter_parity},
      {"patch-geometry table", patch_geometry},
      {"metric oracles", metric_oracles},
      {"CosFace algebra", cosface_algebra},
      {"forward-error protocol", forward_error_protocol},
      {"ablation harness", ablation_harness},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << fmt::format("{} criterion {:>2} {}: {} [{:.1f} s]", o.pass ? "PASS" : "FAIL", id,
                             criteria[i].first, o.detail, seconds_since(t0))
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
