#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "partvit/cosface/cosface.hpp"
#include "partvit/data/augment.hpp"
#include "partvit/trainer/optim.hpp"
#include "partvit/vit/config.hpp"

namespace partvit {

/// Everything a training run reads. steps_per_epoch in `schedule` is derived
/// from the data and batch size at run time.
struct TrainConfig {
  ModelConfig model;
  AugmentConfig augment;
  CosFaceConfig cosface;
  AdamWConfig optimizer;
  Schedule schedule;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  /// Validation images scored after every epoch for the held-out loss.
  std::size_t heldout_batch = 64;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& doc);

/// Builds a config from a (possibly partial) document. Missing keys take the
/// defaults of model.preset (fvit-tiny when absent); unknown keys and type
/// mismatches throw ConfigError naming the dotted key. When the document
/// sets model.num_patches without model.patch_size, K is re-derived.
TrainConfig train_config_from_json(const nlohmann::json& doc);

/// Applies "a.b.c=value" overrides to a partial document. The value is read
/// as JSON when it parses, else as a string. Keys must exist in the schema.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

}  // namespace partvit
