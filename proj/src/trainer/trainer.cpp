#include "partvit/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "partvit/common/rng.hpp"
#include "partvit/data/augment.hpp"
#include "partvit/trainer/checkpoint.hpp"

namespace partvit {

namespace {

// Stream tags keep the per-purpose generators independent.
constexpr std::uint64_t kOrderStream = 11;
constexpr std::uint64_t kAugmentStream = 12;
constexpr std::uint64_t kMixStream = 13;
constexpr std::uint64_t kDepthStream = 14;
constexpr std::uint64_t kHeadStream = 15;

std::vector<Image> augment_batch(const std::vector<Sample>& data, std::span<const std::size_t> idx,
                                 const TrainConfig& cfg, std::size_t epoch) {
  std::vector<Image> out(idx.size());
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      auto rng = make_rng({cfg.seed, kAugmentStream, epoch, idx[i]});
      out[i] = augment(data[idx[i]].image, cfg.augment, rng, true);
    }
  };
  const std::size_t workers = std::min(cfg.workers, idx.size());
  if (workers <= 1) {
    work(0, idx.size());
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (idx.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk, hi = std::min(idx.size(), lo + chunk);
    if (lo < hi) pool.emplace_back(work, lo, hi);
  }
  for (auto& t : pool) t.join();
  return out;
}

std::size_t count_correct(const ad::Tensor<float>& embedding, const CosFaceHead<float>& head,
                          std::span<const std::size_t> targets) {
  ad::NoGradGuard guard;
  const auto cos = cosine_logits(embedding.detach(), head);
  const std::size_t classes = cos.size(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const auto row = cos.data().subspan(b * classes, classes);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == targets[b];
  }
  return correct;
}

}  // namespace

FaceModel init_face_model(const TrainConfig& cfg, std::size_t num_classes) {
  FaceModel m;
  m.backbone = init_backbone<float>(cfg.model, cfg.seed);
  auto rng = make_rng({cfg.seed, kHeadStream});
  m.head = init_cosface_head<float>(cfg.model.embed_dim, num_classes, rng);
  return m;
}

double evaluate_loss(const FaceModel& model, const TrainConfig& cfg, const std::vector<Sample>& samples,
                     std::size_t batch_size) {
  if (samples.empty()) return 0.0;
  ad::NoGradGuard guard;
  double total = 0.0;
  for (std::size_t lo = 0; lo < samples.size(); lo += batch_size) {
    const std::size_t hi = std::min(samples.size(), lo + batch_size);
    std::vector<Image> imgs;
    std::vector<std::size_t> labels;
    for (std::size_t i = lo; i < hi; ++i) {
      imgs.push_back(samples[i].image);
      labels.push_back(samples[i].label);
    }
    const auto out = backbone_forward(stack_images(imgs), model.backbone);
    total += cosface_loss(out.embedding, labels, model.head, cfg.cosface).item() * static_cast<double>(hi - lo);
  }
  return total / static_cast<double>(samples.size());
}

double evaluate_accuracy(const FaceModel& model, const std::vector<Sample>& samples, std::size_t batch_size) {
  if (samples.empty()) return 0.0;
  ad::NoGradGuard guard;
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < samples.size(); lo += batch_size) {
    const std::size_t hi = std::min(samples.size(), lo + batch_size);
    std::vector<Image> imgs;
    std::vector<std::size_t> labels;
    for (std::size_t i = lo; i < hi; ++i) {
      imgs.push_back(samples[i].image);
      labels.push_back(samples[i].label);
    }
    const auto out = backbone_forward(stack_images(imgs), model.backbone);
    correct += count_correct(out.embedding, model.head, labels);
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train_loop(FaceModel& model, const TrainConfig& cfg_in, std::size_t num_classes,
                       const std::vector<Sample>& train, const TrainOptions& opts) {
  TrainConfig cfg = cfg_in;
  if (train.empty()) throw ContractError("train_loop: empty training set");
  if (model.head.num_classes() != num_classes) {
    throw ContractError("train_loop: head has " + std::to_string(model.head.num_classes()) +
                        " classes, data has " + std::to_string(num_classes));
  }
  for (const auto& s : train) {
    if (s.label >= num_classes) throw ContractError("train_loop: label out of range in '" + s.id + "'");
  }
  if (cfg.schedule.total_epochs == 0) {
    if (!opts.checkpoint_dir.empty()) save_checkpoint(opts.checkpoint_dir, model, cfg, num_classes);
    return {};
  }
  cfg.schedule.steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  if (!cfg.augment.warmup) cfg.schedule.warmup_epochs = 0;
  cfg.validate();

  AdamW<float> opt(collect_params<float>(model), cfg.optimizer);
  const double depth_prob = cfg.augment.stochastic_depth ? cfg.model.stochastic_depth_prob : 0.0;

  std::vector<Sample> heldout(opts.heldout.begin(),
                              opts.heldout.begin() + std::min(opts.heldout.size(), cfg.heldout_batch));

  std::ofstream csv;
  if (!opts.metrics_csv.empty()) {
    if (opts.metrics_csv.has_parent_path()) std::filesystem::create_directories(opts.metrics_csv.parent_path());
    csv.open(opts.metrics_csv);
    if (!csv) throw IoError("cannot write " + opts.metrics_csv.string());
    csv << "epoch,step,lr,loss,train_acc\n";
  }

  TrainResult result;
  std::size_t global_step = 0;
  double last_lr = 0.0;
  std::array<double, 3> last_norms{0.0, 0.0, 0.0};

  for (std::size_t epoch = 0; epoch < cfg.schedule.total_epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto order_rng = make_rng({cfg.seed, kOrderStream, epoch});
    std::shuffle(order.begin(), order.end(), order_rng);

    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t step = 0; step < cfg.schedule.steps_per_epoch; ++step) {
      const std::size_t lo = step * cfg.batch_size;
      const std::size_t hi = std::min(train.size(), lo + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);

      auto images = augment_batch(train, idx, cfg, epoch);
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(train[i].label);
      auto mix_rng = make_rng({cfg.seed, kMixStream, epoch, step});
      auto batch = mixup_and_cutout(std::move(images), std::move(labels), cfg.augment, mix_rng);

      auto depth_rng = make_rng({cfg.seed, kDepthStream, epoch, step});
      ForwardOptions fopts;
      fopts.training = true;
      fopts.rng = &depth_rng;
      fopts.stochastic_depth_prob = depth_prob;
      const double lr = cosine_warmup_lr(global_step, cfg.schedule);
      auto diverged = [&](const std::string& cause) {
        const nlohmann::json diag = {{"error", cause},
                                     {"epoch", epoch + 1},
                                     {"step", global_step},
                                     {"lr", lr},
                                     {"last_lr", last_lr},
                                     {"grad_norms",
                                      {{"vit", last_norms[0]}, {"landmark", last_norms[1]}, {"no_decay", last_norms[2]}}}};
        return TrainingDiverged(cause + " at step " + std::to_string(global_step), diag.dump());
      };
      ad::Tensor<float> embedding, loss;
      try {
        embedding = backbone_forward(stack_images(batch.images), model.backbone, fopts).embedding;
        loss = batch.applied ? cosface_loss_mixup(embedding, batch.labels_a, batch.labels_b, batch.lambda,
                                                  model.head, cfg.cosface)
                             : cosface_loss(embedding, batch.labels_a, model.head, cfg.cosface);
      } catch (const NumericError& e) {
        throw diverged(std::string("non-finite values: ") + e.what());
      }
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw diverged("non-finite loss");

      opt.zero_grad();
      loss.backward();
      last_norms = {opt.grad_norm(ParamGroup::vit), opt.grad_norm(ParamGroup::landmark),
                    opt.grad_norm(ParamGroup::no_decay)};
      if (opts.on_step) opts.on_step(global_step, opt);
      opt.step(lr);
      last_lr = lr;
      ++global_step;

      const std::size_t n = batch.labels_a.size();
      loss_sum += loss_value * static_cast<double>(n);
      seen += n;
      correct += count_correct(embedding, model.head,
                               batch.lambda >= 0.5 ? batch.labels_a : batch.labels_b);
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.step = global_step;
    m.lr = last_lr;
    m.loss = loss_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    m.heldout_loss = heldout.empty() ? 0.0 : evaluate_loss(model, cfg, heldout);
    result.history.push_back(m);
    spdlog::info("epoch {:>3}  lr {:.3e}  loss {:.4f}  acc {:.3f}  heldout {:.4f}", m.epoch, m.lr, m.loss,
                 m.train_acc, m.heldout_loss);
    if (csv) {
      csv << fmt::format("{},{},{:.9g},{:.9g},{:.9g}\n", m.epoch, m.step, m.lr, m.loss, m.train_acc);
      csv.flush();
    }
    if (opts.on_epoch) opts.on_epoch(m);
    if (!opts.checkpoint_dir.empty() && opts.checkpoint_every > 0 && m.epoch % opts.checkpoint_every == 0 &&
        m.epoch != cfg.schedule.total_epochs) {
      save_checkpoint(opts.checkpoint_dir / ("epoch_" + std::to_string(m.epoch)), model, cfg, num_classes, &opt,
                      m.epoch, nlohmann::json{{"seed", cfg.seed}, {"epoch", m.epoch}}.dump());
    }
  }
  result.steps = global_step;
  if (!opts.checkpoint_dir.empty()) {
    save_checkpoint(opts.checkpoint_dir, model, cfg, num_classes, &opt, cfg.schedule.total_epochs,
                    nlohmann::json{{"seed", cfg.seed}, {"epoch", cfg.schedule.total_epochs}}.dump());
  }
  return result;
}

}  // namespace partvit
