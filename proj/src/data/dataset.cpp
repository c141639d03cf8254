#include "partvit/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "partvit/common/rng.hpp"
#include "partvit/errors.hpp"

namespace partvit {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
  double x, y;
};

// Smooth coverage of a shape given its signed distance (negative inside).
double coverage(double sd, double aa) { return std::clamp(0.5 - sd / aa, 0.0, 1.0); }

double sd_disc(Vec2 p, Vec2 c, double r) { return std::hypot(p.x - c.x, p.y - c.y) - r; }

double sd_ellipse(Vec2 p, Vec2 c, double rx, double ry) {
  const double k = std::hypot((p.x - c.x) / rx, (p.y - c.y) / ry);
  return (k - 1.0) * std::min(rx, ry);
}

double sd_capsule(Vec2 p, Vec2 a, Vec2 b, double r) {
  const double bx = b.x - a.x, by = b.y - a.y;
  const double t = std::clamp(((p.x - a.x) * bx + (p.y - a.y) * by) / (bx * bx + by * by), 0.0, 1.0);
  return std::hypot(p.x - a.x - t * bx, p.y - a.y - t * by) - r;
}

void blend(std::array<double, 3>& dst, const std::array<float, 3>& src, double alpha) {
  for (int c = 0; c < 3; ++c) dst[c] += alpha * (src[c] - dst[c]);
}

std::string pad4(std::size_t v) {
  std::ostringstream os;
  os.width(4);
  os.fill('0');
  os << v;
  return os.str();
}

struct Nuisance {
  double dx, dy, angle, scale, brightness;
  std::array<float, 3> background;
};

Vec2 to_image(const Nuisance& n, Vec2 q) {
  const double c = std::cos(n.angle), s = std::sin(n.angle);
  const double ux = q.x - 0.5, uy = q.y - 0.5;
  return {0.5 + n.dx + n.scale * (c * ux - s * uy), 0.5 + n.dy + n.scale * (s * ux + c * uy)};
}

Vec2 to_canonical(const Nuisance& n, Vec2 p) {
  const double c = std::cos(n.angle), s = std::sin(n.angle);
  const double ux = (p.x - 0.5 - n.dx) / n.scale, uy = (p.y - 0.5 - n.dy) / n.scale;
  return {0.5 + c * ux + s * uy, 0.5 - s * ux + c * uy};
}

std::array<double, 3> shade(const FaceLatent& f, Vec2 q, const std::array<float, 3>& background, double aa) {
  std::array<double, 3> col{background[0], background[1], background[2]};
  blend(col, f.skin, coverage(sd_ellipse(q, {0.5, 0.52}, f.face_rx, f.face_ry), aa));
  const std::array<float, 3> brow{f.skin[0] * 0.35f, f.skin[1] * 0.3f, f.skin[2] * 0.3f};
  const std::array<float, 3> white{0.93f, 0.93f, 0.9f};
  const std::array<float, 3> pupil{0.04f, 0.04f, 0.05f};
  for (double side : {-1.0, 1.0}) {
    const Vec2 eye{0.5 + side * f.eye_half_gap, f.eye_y};
    const double by = f.eye_y - 2.2 * f.eye_radius;
    blend(col, brow, coverage(sd_capsule(q, {eye.x - 1.6 * f.eye_radius, by}, {eye.x + 1.6 * f.eye_radius, by},
                                         0.25 * f.eye_radius), aa));
    blend(col, white, coverage(sd_ellipse(q, eye, 1.7 * f.eye_radius, 1.05 * f.eye_radius), aa));
    blend(col, f.iris, coverage(sd_disc(q, eye, f.eye_radius), aa));
    blend(col, pupil, coverage(sd_disc(q, eye, 0.45 * f.eye_radius), aa));
  }
  const std::array<float, 3> nose{f.skin[0] * f.nose_shade, f.skin[1] * f.nose_shade, f.skin[2] * f.nose_shade};
  blend(col, nose, coverage(sd_ellipse(q, {0.5, f.nose_y - 0.5 * f.nose_length}, f.nose_width, 0.5 * f.nose_length), aa));
  blend(col, pupil, coverage(sd_disc(q, {0.5 - 0.6 * f.nose_width, f.nose_y}, 0.3 * f.nose_width), aa));
  blend(col, pupil, coverage(sd_disc(q, {0.5 + 0.6 * f.nose_width, f.nose_y}, 0.3 * f.nose_width), aa));
  blend(col, f.lips, coverage(sd_capsule(q, {0.5 - f.mouth_half_width, f.mouth_y}, {0.5 + f.mouth_half_width, f.mouth_y},
                                         f.mouth_thickness), aa));
  return col;
}

}  // namespace

std::vector<Sample> Dataset::subset(const std::vector<std::size_t>& idx) const {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(samples.at(i));
  return out;
}

void SyntheticFaceSpec::validate() const {
  if (num_identities < 2) throw ConfigError("synthetic data needs at least two identities");
  if (images_per_identity == 0) throw ConfigError("images_per_identity must be positive");
  if (val_per_identity >= images_per_identity) {
    throw ConfigError("val_per_identity must leave at least one training image per identity");
  }
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  if (!(max_shift >= 0.0 && max_shift <= 0.25)) throw ConfigError("max_shift must lie in [0, 0.25]");
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 45.0)) {
    throw ConfigError("max_rotation_deg must lie in [0, 45]");
  }
  if (!(min_scale > 0.0 && min_scale <= max_scale)) throw ConfigError("scale range must satisfy 0 < min <= max");
}

PartCenters FaceLatent::canonical_parts() const {
  return {{{0.5 - eye_half_gap, eye_y},
           {0.5 + eye_half_gap, eye_y},
           {0.5, nose_y},
           {0.5 - mouth_half_width, mouth_y},
           {0.5 + mouth_half_width, mouth_y}}};
}

FaceLatent identity_latent(std::uint64_t seed, std::size_t identity) {
  auto rng = make_rng({seed, 0, identity});
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uf = [&](double lo, double hi) { return static_cast<float>(u(lo, hi)); };
  FaceLatent f;
  f.skin = {uf(0.55, 0.95), uf(0.4, 0.8), uf(0.3, 0.7)};
  f.iris = {uf(0.0, 0.6), uf(0.0, 0.6), uf(0.0, 0.6)};
  f.lips = {uf(0.45, 0.95), uf(0.05, 0.4), uf(0.1, 0.45)};
  f.nose_shade = uf(0.55, 0.85);
  f.face_rx = u(0.30, 0.37);
  f.face_ry = u(0.38, 0.45);
  f.eye_y = u(0.35, 0.44);
  f.eye_half_gap = u(0.11, 0.18);
  f.eye_radius = u(0.04, 0.065);
  f.nose_y = u(0.55, 0.62);
  f.nose_length = u(0.10, 0.16);
  f.nose_width = u(0.035, 0.06);
  f.mouth_y = u(0.70, 0.77);
  f.mouth_half_width = u(0.07, 0.14);
  f.mouth_thickness = u(0.015, 0.032);
  return f;
}

Dataset synth_generate(const SyntheticFaceSpec& spec) {
  spec.validate();
  Dataset data;
  data.num_identities = spec.num_identities;
  const std::size_t n = spec.image_size;
  const double aa = 1.0 / static_cast<double>(n);
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    const FaceLatent face = identity_latent(spec.seed, id);
    for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
      auto rng = make_rng({spec.seed, 1, id, k});
      auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
      Nuisance nz;
      nz.dx = u(-spec.max_shift, spec.max_shift);
      nz.dy = u(-spec.max_shift, spec.max_shift);
      nz.angle = u(-spec.max_rotation_deg, spec.max_rotation_deg) * kPi / 180.0;
      nz.scale = u(spec.min_scale, spec.max_scale);
      nz.brightness = u(0.85, 1.15);
      nz.background = {static_cast<float>(u(0.0, 0.5)), static_cast<float>(u(0.0, 0.5)),
                       static_cast<float>(u(0.0, 0.5))};
      std::normal_distribution<double> noise(0.0, 0.015);

      Image img(3, n, n);
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const Vec2 p{(static_cast<double>(x) + 0.5) / n, (static_cast<double>(y) + 0.5) / n};
          const auto col = shade(face, to_canonical(nz, p), nz.background, aa / nz.scale);
          for (std::size_t c = 0; c < 3; ++c) {
            img.at(c, y, x) = static_cast<float>(col[c] * nz.brightness + noise(rng));
          }
        }
      }
      quantize_8bit(img);

      PartCenters parts;
      const auto canon = face.canonical_parts();
      for (std::size_t i = 0; i < 5; ++i) {
        const Vec2 p = to_image(nz, {canon[i][0], canon[i][1]});
        parts[i] = {p.x, p.y};
      }
      const std::size_t index = data.samples.size();
      data.samples.push_back({std::move(img), id, pad4(id) + "/" + pad4(k)});
      data.parts.push_back(parts);
      (k + spec.val_per_identity < spec.images_per_identity ? data.train : data.val).push_back(index);
    }
  }
  return data;
}

void write_dataset(const fs::path& root, const Dataset& data) {
  fs::create_directories(root);
  json train = json::array(), val = json::array();
  for (auto i : data.train) train.push_back(data.samples.at(i).id);
  for (auto i : data.val) val.push_back(data.samples.at(i).id);
  const Image& first = data.samples.front().image;
  json manifest = {{"splits", {{"train", train}, {"val", val}}},
                   {"identities", data.num_identities},
                   {"image_size", {first.height, first.width}},
                   {"channels", first.channels}};
  std::ofstream parts_out;
  if (!data.parts.empty()) {
    manifest["parts_file"] = "parts.jsonl";
    parts_out.open(root / "parts.jsonl");
    if (!parts_out) throw IoError("cannot write " + (root / "parts.jsonl").string());
  }
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const fs::path file = root / (s.id + ".png");
    fs::create_directories(file.parent_path());
    write_png(file, s.image);
    if (!data.parts.empty()) {
      json pts = json::array();
      for (const auto& p : data.parts[i]) pts.push_back({p[0], p[1]});
      parts_out << json{{"id", s.id}, {"parts", pts}}.dump() << '\n';
    }
  }
  std::ofstream out(root / "manifest.json");
  if (!out) throw IoError("cannot write " + (root / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& root, std::size_t channels) {
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("dataset manifest not found: " + manifest_path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("splits") || !manifest.contains("identities")) {
    throw IoError("manifest " + manifest_path.string() + " needs 'splits' and 'identities'");
  }
  std::vector<std::string> train_ids, val_ids;
  const auto& splits = manifest.at("splits");
  if (splits.contains("train")) train_ids = splits.at("train").get<std::vector<std::string>>();
  if (splits.contains("val")) val_ids = splits.at("val").get<std::vector<std::string>>();

  auto identity_of = [](const std::string& id) {
    const auto slash = id.find('/');
    if (slash == std::string::npos || slash == 0) throw IoError("sample id '" + id + "' lacks an identity directory");
    return id.substr(0, slash);
  };
  std::set<std::string> dirs;
  for (const auto* ids : {&train_ids, &val_ids})
    for (const auto& id : *ids) dirs.insert(identity_of(id));
  std::map<std::string, std::size_t> label_of;
  for (const auto& d : dirs) label_of.emplace(d, label_of.size());

  Dataset data;
  data.num_identities = manifest.at("identities").get<std::size_t>();
  if (label_of.size() > data.num_identities) {
    throw IoError("manifest declares " + std::to_string(data.num_identities) + " identities but splits use " +
                  std::to_string(label_of.size()));
  }
  std::map<std::string, std::size_t> index_of;
  auto add = [&](const std::string& id, std::vector<std::size_t>& split) {
    auto [it, inserted] = index_of.emplace(id, data.samples.size());
    if (inserted) {
      data.samples.push_back({read_png(root / (id + ".png"), channels), label_of.at(identity_of(id)), id});
    }
    split.push_back(it->second);
  };
  for (const auto& id : train_ids) add(id, data.train);
  for (const auto& id : val_ids) add(id, data.val);

  if (manifest.contains("parts_file")) {
    const fs::path parts_path = root / manifest.at("parts_file").get<std::string>();
    std::ifstream pin(parts_path);
    if (!pin) throw IoError("parts file not found: " + parts_path.string());
    std::map<std::string, PartCenters> by_id;
    std::string line;
    while (std::getline(pin, line)) {
      if (line.empty()) continue;
      const auto rec = json::parse(line);
      PartCenters pc;
      const auto& pts = rec.at("parts");
      if (pts.size() != 5) throw IoError("parts record for " + rec.at("id").get<std::string>() + " needs 5 points");
      for (std::size_t i = 0; i < 5; ++i) pc[i] = {pts[i][0].get<double>(), pts[i][1].get<double>()};
      by_id[rec.at("id").get<std::string>()] = pc;
    }
    data.parts.reserve(data.samples.size());
    for (const auto& s : data.samples) {
      auto it = by_id.find(s.id);
      if (it == by_id.end()) throw IoError("parts file has no entry for " + s.id);
      data.parts.push_back(it->second);
    }
  }
  return data;
}

}  // namespace partvit
