#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "partvit/data/dataset.hpp"
#include "partvit/part/part.hpp"

namespace partvit {

struct EmbeddingRecord {
  std::string id;
  std::size_t label = 0;
  std::vector<float> embedding;  // unit norm
};

struct LandmarkRecord {
  std::string id;
  std::vector<std::array<double, 2>> landmarks;  // normalized (x, y)
};

/// Eval-mode class-token embeddings, L2-normalized, in sample order.
std::vector<EmbeddingRecord> embed_extract(const Backbone<float>& model, const std::vector<Sample>& samples,
                                           std::size_t batch_size = 64);

/// Landmark-CNN outputs (the regular grid for the holistic variant).
std::vector<LandmarkRecord> landmark_extract(const Backbone<float>& model, const std::vector<Sample>& samples,
                                             std::size_t batch_size = 64);

/// JSON lines {"id", "label", "embedding": [...]}.
void write_embeddings_jsonl(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records);
/// Throws IoError naming the file and line of the first malformed record.
std::vector<EmbeddingRecord> read_embeddings_jsonl(const std::filesystem::path& path);

/// JSON lines {"id", "landmarks": [[x, y], ...]}.
void write_landmarks_jsonl(const std::filesystem::path& path, const std::vector<LandmarkRecord>& records);
std::vector<LandmarkRecord> read_landmarks_jsonl(const std::filesystem::path& path);

/// Ground-truth parts as written by write_dataset: {"id", "parts": [[x, y] x 5]}.
std::vector<LandmarkRecord> read_parts_jsonl(const std::filesystem::path& path);

/// {"metric", "value", "config"}.
nlohmann::json metric_document(const std::string& metric, double value, nlohmann::json config = nlohmann::json::object());

struct AttentionMap {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t tokens = 0;
  std::vector<float> rows;  // [tokens, tokens], row-stochastic
  std::size_t grid_side = 0;
  /// Class-token attention to the patches on a grid_side^2 grid. Part
  /// variant: each patch's weight is added to the cell holding its landmark.
  std::vector<float> spatial;
};

/// Attention of every head at each requested layer (the last one when
/// `layers` is empty) for one image. Invalid layer -> ContractError.
std::vector<AttentionMap> attention_map_dump(const Backbone<float>& model, const Image& image,
                                             std::vector<std::size_t> layers = {},
                                             std::vector<std::array<double, 2>>* landmarks_out = nullptr);

/// Writes <stem>.json ({"id", "landmarks", "maps": [{"layer", "head",
/// "tokens", "rows", "grid_side", "spatial"}]}) and <stem>.f32 with every
/// map's rows back to back as little-endian float32.
void write_attention_dump(const std::filesystem::path& stem, const std::string& id,
                          const std::vector<AttentionMap>& maps,
                          const std::vector<std::array<double, 2>>& landmarks);

}  // namespace partvit
