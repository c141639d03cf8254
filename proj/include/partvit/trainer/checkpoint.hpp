#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "partvit/trainer/config.hpp"
#include "partvit/trainer/optim.hpp"
#include "partvit/trainer/trainer.hpp"

namespace partvit {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::string dtype = "float32";
  std::size_t offset = 0;  // bytes into params.bin
};

struct CheckpointManifest {
  int format_version = kCheckpointFormatVersion;
  std::vector<CheckpointEntry> tensors;
  nlohmann::json config;
  std::size_t num_classes = 0;
  std::size_t epoch = 0;
  bool has_optimizer = false;
  std::uint64_t optimizer_step = 0;
  std::string rng_state;

  /// Checks non-overlapping offsets and unique names.
  void validate() const;
};

/// Writes dir/manifest.json and dir/params.bin (little-endian float32, in
/// visit order); with an optimizer also dir/optimizer.bin holding both
/// moment buffers as float64.
void save_checkpoint(const std::filesystem::path& dir, FaceModel& model, const TrainConfig& cfg,
                     std::size_t num_classes, const AdamW<float>* optimizer = nullptr,
                     std::size_t epoch = 0, const std::string& rng_state = {});

CheckpointManifest read_manifest(const std::filesystem::path& dir);

struct LoadedCheckpoint {
  CheckpointManifest manifest;
  TrainConfig config;
  FaceModel model;
  std::optional<OptimizerState> optimizer;
};

/// Rebuilds the model from the stored config and fills its parameters.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Fills an existing model. Throws CheckpointError naming the offending
/// tensor on unknown, missing or mis-shaped entries.
void load_parameters(const std::filesystem::path& dir, FaceModel& model);

}  // namespace partvit
