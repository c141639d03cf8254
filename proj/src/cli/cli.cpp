#include "partvit/cli/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "partvit/errors.hpp"
#include "partvit/evalsuite/metrics.hpp"
#include "partvit/evalsuite/records.hpp"
#include "partvit/trainer/checkpoint.hpp"
#include "partvit/trainer/trainer.hpp"

namespace partvit {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// A usage problem detected after parsing (missing input, bad combination).
class UsageError : public Error {
 public:
  using Error::Error;
};

struct CommonArgs {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::string checkpoint;
  std::string data;
  std::string preset;
  std::string variant;
  std::size_t patches = 0;
  std::string pos_enc;
  bool bottleneck = false;
  long epochs = -1;
  std::size_t workers = 0;
  std::vector<std::string> overrides;
};

void require_path(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
  if (!fs::exists(value)) throw UsageError(std::string(flag) + ": no such file or directory: " + value);
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot open " + p.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw UsageError(p.string() + " is not valid JSON");
  return doc;
}

void write_json_file(const fs::path& p, const json& doc) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << doc.dump(2) << '\n';
}

// Precedence: flags and key=value overrides > config file > preset defaults.
TrainConfig resolve_train_config(const CommonArgs& a) {
  json doc = a.config.empty() ? json::object() : read_json_file(a.config);
  std::vector<std::string> ov;
  if (!a.preset.empty()) ov.push_back("model.preset=\"" + a.preset + "\"");
  if (!a.variant.empty()) ov.push_back("model.variant=\"" + a.variant + "\"");
  if (a.patches) ov.push_back("model.num_patches=" + std::to_string(a.patches));
  if (!a.pos_enc.empty()) ov.push_back("model.pos_encoding=\"" + a.pos_enc + "\"");
  if (a.bottleneck) ov.push_back("model.bottleneck_violation=true");
  if (a.epochs >= 0) ov.push_back("schedule.total_epochs=" + std::to_string(a.epochs));
  if (a.workers) ov.push_back("workers=" + std::to_string(a.workers));
  if (a.seed_set) ov.push_back("seed=" + std::to_string(a.seed));
  ov.insert(ov.end(), a.overrides.begin(), a.overrides.end());
  apply_overrides(doc, ov);
  TrainConfig cfg = train_config_from_json(doc);
  auto& s = cfg.schedule;
  if (s.total_epochs > 0 && s.warmup_epochs >= s.total_epochs) {
    spdlog::info("warm-up shortened to {} epochs for a {}-epoch run", s.total_epochs - 1, s.total_epochs);
    s.warmup_epochs = s.total_epochs - 1;
  }
  cfg.model.validate();
  return cfg;
}

std::vector<Sample> select_split(const Dataset& data, const std::string& split) {
  if (split == "all") return data.samples;
  if (split == "train") return data.subset(data.train);
  if (split == "val") return data.subset(data.val);
  throw UsageError("--split must be all, train or val");
}

int cmd_generate(const CommonArgs& a, SyntheticFaceSpec spec) {
  if (a.out.empty()) throw UsageError("--out is required");
  if (a.seed_set) spec.seed = a.seed;
  spec.validate();
  const auto data = synth_generate(spec);
  write_dataset(a.out, data);
  spdlog::info("wrote {} images of {} identities to {}", data.samples.size(), data.num_identities, a.out);
  return kExitOk;
}

int cmd_train(const CommonArgs& a) {
  require_path(a.data, "--data");
  if (a.out.empty()) throw UsageError("--out is required");
  TrainConfig cfg = resolve_train_config(a);
  const Dataset data = load_dataset(a.data, cfg.model.channels);
  if (data.samples.empty()) throw UsageError("dataset at " + a.data + " is empty");
  const auto& img = data.samples.front().image;
  if (img.height != cfg.model.image_height || img.width != cfg.model.image_width) {
    throw UsageError("dataset images are " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     ", model expects " + std::to_string(cfg.model.image_height) + "x" +
                     std::to_string(cfg.model.image_width));
  }
  const fs::path out = a.out;
  fs::create_directories(out);
  write_json_file(out / "config.json", to_json(cfg));

  FaceModel model = init_face_model(cfg, data.num_identities);
  TrainOptions opts;
  opts.metrics_csv = out / "metrics.csv";
  opts.checkpoint_dir = out / "checkpoint";
  opts.heldout = data.subset(data.val);
  try {
    const auto result = train_loop(model, cfg, data.num_identities, data.subset(data.train), opts);
    json history = json::array();
    for (const auto& m : result.history) {
      history.push_back({{"epoch", m.epoch}, {"step", m.step}, {"lr", m.lr}, {"loss", m.loss},
                         {"train_acc", m.train_acc}, {"heldout_loss", m.heldout_loss}});
    }
    const json summary = {{"epochs", cfg.schedule.total_epochs},
                          {"steps", result.steps},
                          {"train_accuracy", evaluate_accuracy(model, data.subset(data.train))},
                          {"val_accuracy", evaluate_accuracy(model, data.subset(data.val))},
                          {"history", history}};
    write_json_file(out / "summary.json", summary);
    spdlog::info("train accuracy {:.4f}, val accuracy {:.4f}", summary["train_accuracy"].get<double>(),
                 summary["val_accuracy"].get<double>());
  } catch (const TrainingDiverged& e) {
    std::ofstream(out / "diagnostics.json") << e.diagnostics << '\n';
    std::cerr << e.diagnostics << '\n';
    throw;
  }
  return kExitOk;
}

LoadedCheckpoint open_checkpoint(const CommonArgs& a) {
  require_path(a.checkpoint, "--checkpoint");
  return load_checkpoint(a.checkpoint);
}

Dataset open_data(const CommonArgs& a, const ModelConfig& cfg) {
  require_path(a.data, "--data");
  Dataset data = load_dataset(a.data, cfg.channels);
  if (!data.samples.empty()) {
    const auto& img = data.samples.front().image;
    if (img.height != cfg.image_height || img.width != cfg.image_width) {
      throw CheckpointError("checkpoint expects " + std::to_string(cfg.image_height) + "x" +
                            std::to_string(cfg.image_width) + " images, dataset has " +
                            std::to_string(img.height) + "x" + std::to_string(img.width));
    }
  }
  return data;
}

int cmd_extract(const CommonArgs& a, const std::string& split) {
  if (a.out.empty()) throw UsageError("--out is required");
  auto ck = open_checkpoint(a);
  const auto data = open_data(a, ck.config.model);
  write_embeddings_jsonl(a.out, embed_extract(ck.model.backbone, select_split(data, split)));
  return kExitOk;
}

int cmd_landmarks(const CommonArgs& a, const std::string& split) {
  if (a.out.empty()) throw UsageError("--out is required");
  auto ck = open_checkpoint(a);
  const auto data = open_data(a, ck.config.model);
  write_landmarks_jsonl(a.out, landmark_extract(ck.model.backbone, select_split(data, split)));
  return kExitOk;
}

int cmd_attention(const CommonArgs& a, const std::string& split, const std::vector<std::size_t>& layers,
                  std::size_t count) {
  if (a.out.empty()) throw UsageError("--out is required");
  auto ck = open_checkpoint(a);
  const auto data = open_data(a, ck.config.model);
  const auto samples = select_split(data, split);
  fs::create_directories(a.out);
  json index = json::array();
  for (std::size_t i = 0; i < std::min(count, samples.size()); ++i) {
    std::vector<std::array<double, 2>> lm;
    const auto maps = attention_map_dump(ck.model.backbone, samples[i].image, layers, &lm);
    std::string stem = samples[i].id;
    std::replace(stem.begin(), stem.end(), '/', '_');
    write_attention_dump(fs::path(a.out) / stem, samples[i].id, maps, lm);
    index.push_back({{"id", samples[i].id}, {"json", stem + ".json"}, {"raw", stem + ".f32"}});
  }
  write_json_file(fs::path(a.out) / "index.json",
                  {{"heads", ck.config.model.heads}, {"tokens", ck.config.model.num_tokens()}, {"images", index}});
  return kExitOk;
}

struct EvalArgs {
  std::vector<std::string> metrics;
  std::string embeddings;
  std::string landmarks;
  std::string parts;
  std::string scores;
  std::string probe_split = "val";
  double far = 1e-4;
  std::size_t folds = 10;
  std::size_t pairs = 1000;
  double patch_size = 0.0;
  std::size_t image_size = 0;
};

json evaluate_metric(const std::string& metric, const EvalArgs& e, const CommonArgs& a) {
  if (metric == "tar_at_far") {
    ScoreSet s;
    json cfg = {{"far", e.far}};
    if (!e.scores.empty()) {
      require_path(e.scores, "--scores");
      const json doc = read_json_file(e.scores);
      try {
        s.genuine = doc.at("genuine").get<std::vector<double>>();
        s.impostor = doc.at("impostor").get<std::vector<double>>();
      } catch (const json::exception& ex) {
        throw UsageError(e.scores + ": " + ex.what());
      }
      cfg["scores"] = e.scores;
    } else {
      require_path(e.embeddings, "--embeddings");
      const auto recs = read_embeddings_jsonl(e.embeddings);
      for (std::size_t i = 0; i < recs.size(); ++i) {
        for (std::size_t j = i + 1; j < recs.size(); ++j) {
          const double c = cosine_similarity(recs[i].embedding, recs[j].embedding);
          (recs[i].label == recs[j].label ? s.genuine : s.impostor).push_back(c);
        }
      }
      cfg["embeddings"] = e.embeddings;
      cfg["genuine"] = s.genuine.size();
      cfg["impostor"] = s.impostor.size();
    }
    return metric_document(metric, tar_at_far(s, e.far), cfg);
  }
  if (metric == "verification") {
    require_path(e.embeddings, "--embeddings");
    const auto recs = read_embeddings_jsonl(e.embeddings);
    std::vector<std::string> ids;
    std::vector<std::size_t> labels;
    std::unordered_map<std::string, std::vector<float>> emb;
    for (const auto& r : recs) {
      ids.push_back(r.id);
      labels.push_back(r.label);
      emb[r.id] = r.embedding;
    }
    const auto pairs = make_verification_pairs(ids, labels, e.pairs, e.folds, a.seed);
    return metric_document(metric, verification_accuracy_kfold(pairs, emb, e.folds),
                           {{"embeddings", e.embeddings}, {"pairs", e.pairs}, {"folds", e.folds}, {"seed", a.seed}});
  }
  if (metric == "rank1") {
    require_path(e.embeddings, "--embeddings");
    require_path(a.data, "--data");
    const auto recs = read_embeddings_jsonl(e.embeddings);
    const Dataset data = load_dataset(a.data);
    std::unordered_map<std::string, bool> is_probe;
    const auto& probe_idx = e.probe_split == "train" ? data.train : data.val;
    for (auto i : probe_idx) is_probe[data.samples[i].id] = true;
    std::vector<std::vector<float>> probes, gallery;
    std::vector<std::size_t> pl, gl;
    for (const auto& r : recs) {
      if (is_probe.count(r.id)) {
        probes.push_back(r.embedding);
        pl.push_back(r.label);
      } else {
        gallery.push_back(r.embedding);
        gl.push_back(r.label);
      }
    }
    return metric_document(metric, rank1_identification(probes, pl, gallery, gl),
                           {{"embeddings", e.embeddings}, {"probes", probes.size()}, {"gallery", gallery.size()}});
  }
  if (metric == "overlap") {
    require_path(e.landmarks, "--landmarks");
    if (e.patch_size <= 0.0 || e.image_size == 0) throw UsageError("overlap needs --patch-size and --image-size");
    const auto recs = read_landmarks_jsonl(e.landmarks);
    std::vector<OverlapStats> per_image;
    const double w = static_cast<double>(e.image_size);
    for (const auto& r : recs) per_image.push_back(overlap_rate_normalized(r.landmarks, w, w, e.patch_size));
    const auto agg = aggregate_overlap(per_image);
    return metric_document(metric, agg.mean,
                           {{"landmarks", e.landmarks}, {"patch_size", e.patch_size}, {"image_size", e.image_size},
                            {"variance", agg.variance}, {"images", per_image.size()}});
  }
  if (metric == "forward_error") {
    require_path(e.landmarks, "--landmarks");
    require_path(a.data, "--data");
    const auto recs = read_landmarks_jsonl(e.landmarks);
    const fs::path parts_path = e.parts.empty() ? fs::path(a.data) / "parts.jsonl" : fs::path(e.parts);
    require_path(parts_path.string(), "--parts");
    const auto parts = read_parts_jsonl(parts_path);
    const json manifest = read_json_file(fs::path(a.data) / "manifest.json");
    std::unordered_map<std::string, Points> truth;
    for (const auto& p : parts) truth[p.id] = p.landmarks;
    std::unordered_map<std::string, bool> in_train;
    for (const auto& id : manifest.at("splits").at("train")) in_train[id.get<std::string>()] = true;
    LandmarkEvalSet set;
    for (const auto& r : recs) {
      const auto it = truth.find(r.id);
      if (it == truth.end()) throw UsageError("no ground-truth parts for '" + r.id + "'");
      (in_train.count(r.id) ? set.train : set.test).push_back(set.predicted.size());
      set.predicted.push_back(r.landmarks);
      set.truth.push_back(it->second);
    }
    const auto res = forward_error(set);
    return metric_document(metric, res.error_percent,
                           {{"landmarks", e.landmarks}, {"train", set.train.size()}, {"test", set.test.size()},
                            {"regularized", res.regularized}});
  }
  throw UsageError("unknown metric '" + metric + "'");
}

int cmd_evaluate(const CommonArgs& a, const EvalArgs& e) {
  if (e.metrics.empty()) throw UsageError("--metric is required");
  std::vector<json> docs;
  for (const auto& m : e.metrics) docs.push_back(evaluate_metric(m, e, a));
  for (const auto& d : docs) {
    std::cout << d.dump() << '\n';
    if (!a.out.empty()) write_json_file(fs::path(a.out) / (d["metric"].get<std::string>() + ".json"), d);
  }
  return kExitOk;
}

void add_model_flags(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "JSON training config");
  cmd->add_option("--preset", a.preset, "Architecture preset")->check(CLI::IsMember({"fvit-b", "fvit-s", "fvit-tiny"}));
  cmd->add_option("--variant", a.variant, "holistic or part")->check(CLI::IsMember({"holistic", "part"}));
  cmd->add_option("--patches", a.patches, "Number of patches R")->check(CLI::IsMember({16, 49, 196}));
  cmd->add_option("--pos-enc", a.pos_enc, "Positional encoding")
      ->check(CLI::IsMember({"trainable", "cosine", "coordinate"}));
  cmd->add_flag("--bottleneck-violation", a.bottleneck, "Leak landmark-CNN features into the tokens");
  cmd->add_option("--epochs", a.epochs, "Training epochs");
  cmd->add_option("--workers", a.workers, "Augmentation threads");
  cmd->add_option("--set", a.overrides, "Dotted config override key=value (repeatable)");
  cmd->allow_extras();
}

}  // namespace

void configure_logging() {
  auto logger = spdlog::get("partvit");
  if (!logger) logger = spdlog::stderr_color_mt("partvit");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("PARTVIT_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept real ones.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
  }
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Part-based face transformer toolkit"};
  app.require_subcommand(1);
  CommonArgs a;
  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", a.seed, "Random seed")->each([&](const std::string&) { a.seed_set = true; });
  };

  SyntheticFaceSpec spec;
  auto* gen = app.add_subcommand("generate", "Write a synthetic face dataset");
  gen->add_option("--out", a.out, "Output directory");
  add_seed(gen);
  gen->add_option("--identities", spec.num_identities, "Number of identities");
  gen->add_option("--images-per-identity", spec.images_per_identity, "Images per identity");
  gen->add_option("--val-per-identity", spec.val_per_identity, "Validation images per identity");
  gen->add_option("--image-size", spec.image_size, "Image side in pixels");
  gen->add_option("--max-shift", spec.max_shift, "Pose shift range");
  gen->add_option("--max-rotation", spec.max_rotation_deg, "Pose rotation range in degrees");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", a.data, "Dataset directory");
  train->add_option("--out", a.out, "Run directory");
  add_seed(train);
  add_model_flags(train, a);

  std::string split = "all";
  auto* extract = app.add_subcommand("extract", "Dump embeddings as JSON lines");
  auto* landmarks = app.add_subcommand("landmarks", "Dump landmarks as JSON lines");
  auto* attention = app.add_subcommand("attention", "Dump attention maps");
  std::vector<std::size_t> layers;
  std::size_t count = 4;
  for (auto* cmd : {extract, landmarks, attention}) {
    cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint directory");
    cmd->add_option("--data", a.data, "Dataset directory");
    cmd->add_option("--out", a.out, cmd == attention ? "Output directory" : "Output JSON-lines file");
    cmd->add_option("--split", split, "all, train or val");
    add_seed(cmd);
  }
  attention->add_option("--layer", layers, "Layer index (repeatable; default last)");
  attention->add_option("--count", count, "Number of images");

  EvalArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Compute metrics from dumps");
  evaluate->add_option("--metric", ev.metrics, "verification, tar_at_far, rank1, overlap, forward_error")
      ->check(CLI::IsMember({"verification", "tar_at_far", "rank1", "overlap", "forward_error"}));
  evaluate->add_option("--embeddings", ev.embeddings, "Embedding JSON lines");
  evaluate->add_option("--landmarks", ev.landmarks, "Landmark JSON lines");
  evaluate->add_option("--parts", ev.parts, "Ground-truth parts JSON lines (default: <data>/parts.jsonl)");
  evaluate->add_option("--scores", ev.scores, "JSON {\"genuine\": [...], \"impostor\": [...]}");
  evaluate->add_option("--data", a.data, "Dataset directory (splits)");
  evaluate->add_option("--out", a.out, "Directory for <metric>.json");
  evaluate->add_option("--far", ev.far, "False accept rate target");
  evaluate->add_option("--folds", ev.folds, "Verification folds");
  evaluate->add_option("--pairs", ev.pairs, "Verification pairs");
  evaluate->add_option("--probe-split", ev.probe_split, "Split used as rank-1 probes")
      ->check(CLI::IsMember({"train", "val"}));
  evaluate->add_option("--patch-size", ev.patch_size, "Patch side K for overlap");
  evaluate->add_option("--image-size", ev.image_size, "Image side for overlap");
  add_seed(evaluate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    // Bare key=value arguments are config overrides.
    for (const auto& extra : train->remaining()) {
      if (extra.find('=') == std::string::npos) throw UsageError("unexpected argument '" + extra + "'");
      a.overrides.push_back(extra);
    }
    if (*gen) return cmd_generate(a, spec);
    if (*train) return cmd_train(a);
    if (*extract) return cmd_extract(a, split);
    if (*landmarks) return cmd_landmarks(a, split);
    if (*attention) return cmd_attention(a, split, layers, count);
    if (*evaluate) return cmd_evaluate(a, ev);
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"partvit"};
  for (const auto& s : args) argv.push_back(s.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace partvit
