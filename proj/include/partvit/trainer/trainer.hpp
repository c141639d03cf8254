#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "partvit/cosface/cosface.hpp"
#include "partvit/data/dataset.hpp"
#include "partvit/errors.hpp"
#include "partvit/part/part.hpp"
#include "partvit/trainer/config.hpp"
#include "partvit/trainer/optim.hpp"

namespace partvit {

/// Backbone plus the CosFace class centres it is trained against.
struct FaceModel {
  Backbone<float> backbone;
  CosFaceHead<float> head;

  template <typename F>
  void visit(F&& f) {
    backbone.visit(f);
    head.visit("head", f);
  }
};

/// Deterministic in (cfg.model, cfg.seed, num_classes).
FaceModel init_face_model(const TrainConfig& cfg, std::size_t num_classes);

/// Raised when a step produces a non-finite loss; `diagnostics` is a JSON
/// document with the epoch, step, last lr and per-group gradient norms.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::string diagnostics)
      : NumericError(what), diagnostics(std::move(diagnostics)) {}
  std::string diagnostics;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // optimizer steps taken so far
  double lr = 0.0;        // rate used by the last step of the epoch
  double loss = 0.0;      // mean training loss over the epoch
  double train_acc = 0.0; // running accuracy of the epoch's batches
  double heldout_loss = 0.0;
};

struct TrainOptions {
  /// Metrics CSV (epoch, step, lr, loss, train_acc); skipped when empty.
  std::filesystem::path metrics_csv;
  /// Final checkpoint directory; skipped when empty.
  std::filesystem::path checkpoint_dir;
  /// Also checkpoint into checkpoint_dir/epoch_<n> every this many epochs (0 = never).
  std::size_t checkpoint_every = 0;
  /// Images for the per-epoch held-out loss; the first cfg.heldout_batch are used.
  std::vector<Sample> heldout;
  std::function<void(const EpochMetrics&)> on_epoch;
  /// Test hook: called after gradients are computed and before each update.
  std::function<void(std::size_t step, const AdamW<float>&)> on_step;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t steps = 0;
};

/// Runs cfg.schedule.total_epochs epochs of CosFace training over `train`.
/// With one worker the result depends only on the inputs.
TrainResult train_loop(FaceModel& model, const TrainConfig& cfg, std::size_t num_classes,
                       const std::vector<Sample>& train, const TrainOptions& opts = {});

/// Mean CosFace loss over `samples` in eval mode.
double evaluate_loss(const FaceModel& model, const TrainConfig& cfg, const std::vector<Sample>& samples,
                     std::size_t batch_size = 64);

/// Top-1 accuracy of the cosine classifier over `samples` in eval mode.
double evaluate_accuracy(const FaceModel& model, const std::vector<Sample>& samples,
                         std::size_t batch_size = 64);

}  // namespace partvit
