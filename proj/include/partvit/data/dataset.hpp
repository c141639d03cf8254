#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "partvit/data/image.hpp"

namespace partvit {

struct Sample {
  Image image;
  std::size_t label = 0;
  std::string id;  // "<identity dir>/<file stem>"
};

/// Centres of the five procedural parts, normalized (x, y): left eye,
/// right eye, nose tip, left mouth corner, right mouth corner.
using PartCenters = std::array<std::array<double, 2>, 5>;

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::size_t> train;  // indices into samples
  std::vector<std::size_t> val;
  std::size_t num_identities = 0;
  /// Ground-truth parts aligned with `samples`; empty when unknown.
  std::vector<PartCenters> parts;

  std::vector<Sample> subset(const std::vector<std::size_t>& idx) const;
};

struct SyntheticFaceSpec {
  std::size_t num_identities = 10;
  std::size_t images_per_identity = 50;
  std::size_t val_per_identity = 10;  // trailing images of each identity
  std::size_t image_size = 56;
  std::uint64_t seed = 0;
  // Per-image pose nuisance, in normalized units.
  double max_shift = 0.12;
  double max_rotation_deg = 10.0;
  double min_scale = 0.93;
  double max_scale = 1.07;

  void validate() const;
};

/// Per-identity appearance. Everything identity-specific lives here.
struct FaceLatent {
  std::array<float, 3> skin;
  std::array<float, 3> iris;
  std::array<float, 3> lips;
  float nose_shade;
  double face_rx, face_ry;
  double eye_y, eye_half_gap, eye_radius;
  double nose_y, nose_length, nose_width;
  double mouth_y, mouth_half_width, mouth_thickness;

  PartCenters canonical_parts() const;
};

/// Deterministic in (seed, identity).
FaceLatent identity_latent(std::uint64_t seed, std::size_t identity);

/// Procedural faces: identity lives in part geometry and colour; each image
/// adds a global shift, rotation, scale, brightness change, background and
/// pixel noise. Pixels are quantized to 8 bits.
Dataset synth_generate(const SyntheticFaceSpec& spec);

/// Writes root/<identity>/<image>.png, manifest.json and parts.jsonl.
void write_dataset(const std::filesystem::path& root, const Dataset& data);

/// Loads a dataset written by write_dataset or laid out the same way by
/// hand. Labels follow the sorted order of identity directory names.
Dataset load_dataset(const std::filesystem::path& root, std::size_t channels = 3);

}  // namespace partvit
