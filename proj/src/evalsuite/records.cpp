#include "partvit/evalsuite/records.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "partvit/cosface/cosface.hpp"
#include "partvit/errors.hpp"

namespace partvit {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <typename F>
void for_batches(const std::vector<Sample>& samples, std::size_t batch_size, F&& f) {
  if (batch_size == 0) throw ContractError("batch size must be positive");
  for (std::size_t lo = 0; lo < samples.size(); lo += batch_size) {
    const std::size_t hi = std::min(samples.size(), lo + batch_size);
    std::vector<Image> imgs;
    for (std::size_t i = lo; i < hi; ++i) imgs.push_back(samples[i].image);
    f(lo, hi, stack_images(imgs));
  }
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

// Calls f(line_number, object) for every non-empty line.
template <typename F>
void for_json_lines(const fs::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const json doc = json::parse(line, nullptr, false);
    auto where = path.string() + ":" + std::to_string(n);
    if (doc.is_discarded() || !doc.is_object()) throw IoError(where + ": not a JSON object");
    try {
      f(doc);
    } catch (const json::exception& e) {
      throw IoError(where + ": " + e.what());
    } catch (const Error& e) {
      throw IoError(where + ": " + e.what());
    }
  }
}

std::vector<std::array<double, 2>> read_points(const json& arr, const char* field) {
  if (!arr.is_array()) throw ContractError(std::string("'") + field + "' must be an array");
  std::vector<std::array<double, 2>> pts;
  for (const auto& p : arr) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      throw ContractError(std::string("'") + field + "' entries must be [x, y]");
    }
    pts.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return pts;
}

json points_json(const std::vector<std::array<double, 2>>& pts) {
  json arr = json::array();
  for (const auto& p : pts) arr.push_back({p[0], p[1]});
  return arr;
}

}  // namespace

std::vector<EmbeddingRecord> embed_extract(const Backbone<float>& model, const std::vector<Sample>& samples,
                                           std::size_t batch_size) {
  ad::NoGradGuard guard;
  std::vector<EmbeddingRecord> out;
  const std::size_t d = model.cfg.embed_dim;
  for_batches(samples, batch_size, [&](std::size_t lo, std::size_t hi, const ad::Tensor<float>& images) {
    const auto emb = l2_normalize_embedding(backbone_forward(images, model).embedding);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto row = emb.data().subspan((i - lo) * d, d);
      out.push_back({samples[i].id, samples[i].label, std::vector<float>(row.begin(), row.end())});
    }
  });
  return out;
}

std::vector<LandmarkRecord> landmark_extract(const Backbone<float>& model, const std::vector<Sample>& samples,
                                             std::size_t batch_size) {
  ad::NoGradGuard guard;
  std::vector<LandmarkRecord> out;
  const std::size_t r = model.cfg.num_patches;
  for_batches(samples, batch_size, [&](std::size_t lo, std::size_t hi, const ad::Tensor<float>& images) {
    const auto lm = backbone_forward(images, model).landmarks;
    for (std::size_t i = lo; i < hi; ++i) {
      LandmarkRecord rec;
      rec.id = samples[i].id;
      for (std::size_t k = 0; k < r; ++k) {
        const std::size_t at = ((i - lo) * r + k) * 2;
        rec.landmarks.push_back({lm.at(at), lm.at(at + 1)});
      }
      out.push_back(std::move(rec));
    }
  });
  return out;
}

void write_embeddings_jsonl(const fs::path& path, const std::vector<EmbeddingRecord>& records) {
  auto out = open_out(path);
  for (const auto& r : records) out << json{{"id", r.id}, {"label", r.label}, {"embedding", r.embedding}}.dump() << '\n';
}

std::vector<EmbeddingRecord> read_embeddings_jsonl(const fs::path& path) {
  std::vector<EmbeddingRecord> out;
  std::size_t dim = 0;
  for_json_lines(path, [&](const json& doc) {
    EmbeddingRecord r;
    r.id = doc.at("id").get<std::string>();
    r.label = doc.at("label").get<std::size_t>();
    r.embedding = doc.at("embedding").get<std::vector<float>>();
    if (r.embedding.empty()) throw ContractError("empty embedding");
    if (dim == 0) dim = r.embedding.size();
    if (r.embedding.size() != dim) throw DimensionError("embedding length differs from earlier records");
    out.push_back(std::move(r));
  });
  return out;
}

void write_landmarks_jsonl(const fs::path& path, const std::vector<LandmarkRecord>& records) {
  auto out = open_out(path);
  for (const auto& r : records) out << json{{"id", r.id}, {"landmarks", points_json(r.landmarks)}}.dump() << '\n';
}

std::vector<LandmarkRecord> read_landmarks_jsonl(const fs::path& path) {
  std::vector<LandmarkRecord> out;
  for_json_lines(path, [&](const json& doc) {
    LandmarkRecord r;
    r.id = doc.at("id").get<std::string>();
    r.landmarks = read_points(doc.at("landmarks"), "landmarks");
    if (!out.empty() && r.landmarks.size() != out.front().landmarks.size()) {
      throw DimensionError("landmark count differs from earlier records");
    }
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<LandmarkRecord> read_parts_jsonl(const fs::path& path) {
  std::vector<LandmarkRecord> out;
  for_json_lines(path, [&](const json& doc) {
    LandmarkRecord r;
    r.id = doc.at("id").get<std::string>();
    r.landmarks = read_points(doc.at("parts"), "parts");
    out.push_back(std::move(r));
  });
  return out;
}

json metric_document(const std::string& metric, double value, json config) {
  return {{"metric", metric}, {"value", value}, {"config", std::move(config)}};
}

std::vector<AttentionMap> attention_map_dump(const Backbone<float>& model, const Image& image,
                                             std::vector<std::size_t> layers,
                                             std::vector<std::array<double, 2>>* landmarks_out) {
  const auto& cfg = model.cfg;
  if (layers.empty()) layers.push_back(cfg.depth - 1);
  for (auto l : layers) {
    if (l >= cfg.depth) {
      throw ContractError("attention_map_dump: layer " + std::to_string(l) + " out of range (depth " +
                          std::to_string(cfg.depth) + ")");
    }
  }
  ad::NoGradGuard guard;
  AttentionCapture capture;
  ForwardOptions opts;
  opts.capture = &capture;
  const auto out = backbone_forward(stack_images({image}), model, opts);

  const std::size_t r = cfg.num_patches, t = cfg.num_tokens(), p = cfg.grid_side();
  std::vector<std::size_t> cell(r);
  std::vector<std::array<double, 2>> landmarks(r);
  for (std::size_t k = 0; k < r; ++k) {
    const double x = out.landmarks.at(2 * k), y = out.landmarks.at(2 * k + 1);
    landmarks[k] = {x, y};
    const auto cx = std::min(p - 1, static_cast<std::size_t>(std::max(0.0, std::floor(x * static_cast<double>(p)))));
    const auto cy = std::min(p - 1, static_cast<std::size_t>(std::max(0.0, std::floor(y * static_cast<double>(p)))));
    cell[k] = cfg.variant == Variant::holistic ? k : cy * p + cx;
  }
  if (landmarks_out) *landmarks_out = landmarks;

  std::vector<AttentionMap> maps;
  for (auto l : layers) {
    const auto& probs = capture.probs.at(l);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      AttentionMap m;
      m.layer = l;
      m.head = h;
      m.tokens = t;
      m.rows.assign(probs.begin() + static_cast<std::ptrdiff_t>(h * t * t),
                    probs.begin() + static_cast<std::ptrdiff_t>((h + 1) * t * t));
      m.grid_side = p;
      m.spatial.assign(p * p, 0.0f);
      for (std::size_t k = 0; k < r; ++k) m.spatial[cell[k]] += m.rows[1 + k];  // class-token row
      maps.push_back(std::move(m));
    }
  }
  return maps;
}

void write_attention_dump(const fs::path& stem, const std::string& id, const std::vector<AttentionMap>& maps,
                          const std::vector<std::array<double, 2>>& landmarks) {
  json arr = json::array();
  std::vector<float> raw;
  for (const auto& m : maps) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.tokens; ++i) {
      rows.push_back(std::vector<float>(m.rows.begin() + static_cast<std::ptrdiff_t>(i * m.tokens),
                                        m.rows.begin() + static_cast<std::ptrdiff_t>((i + 1) * m.tokens)));
    }
    arr.push_back({{"layer", m.layer},
                   {"head", m.head},
                   {"tokens", m.tokens},
                   {"rows", rows},
                   {"grid_side", m.grid_side},
                   {"spatial", m.spatial}});
    raw.insert(raw.end(), m.rows.begin(), m.rows.end());
  }
  auto js = open_out(fs::path(stem.string() + ".json"));
  js << json{{"id", id}, {"landmarks", points_json(landmarks)}, {"maps", arr}}.dump() << '\n';
  std::ofstream bin(stem.string() + ".f32", std::ios::binary);
  if (!bin) throw IoError("cannot write " + stem.string() + ".f32");
  bin.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
}

}  // namespace partvit
