#include "partvit/trainer/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "partvit/errors.hpp"

namespace partvit {

using json = nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

std::vector<char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + p.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& p, const void* data, std::size_t bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw IoError("short write to " + p.string());
}

}  // namespace

void CheckpointManifest::validate() const {
  std::set<std::string> names;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& e : tensors) {
    if (!names.insert(e.name).second) throw CheckpointError("duplicate tensor '" + e.name + "' in manifest");
    if (e.dtype != "float32") throw CheckpointError("tensor '" + e.name + "' has unsupported dtype " + e.dtype);
    std::size_t n = 1;
    for (auto d : e.shape) n *= d;
    spans.emplace_back(e.offset, e.offset + 4 * n);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw CheckpointError("overlapping tensor offsets in manifest");
  }
}

void save_checkpoint(const fs::path& dir, FaceModel& model, const TrainConfig& cfg, std::size_t num_classes,
                     const AdamW<float>* optimizer, std::size_t epoch, const std::string& rng_state) {
  fs::create_directories(dir);
  CheckpointManifest man;
  man.config = to_json(cfg);
  man.num_classes = num_classes;
  man.epoch = epoch;
  man.rng_state = rng_state;

  std::vector<float> blob;
  model.visit([&](const std::string& name, ad::Tensor<float>& t, ParamGroup) {
    CheckpointEntry e;
    e.name = name;
    e.shape = t.shape();
    e.offset = blob.size() * sizeof(float);
    const auto d = t.data();
    blob.insert(blob.end(), d.begin(), d.end());
    man.tensors.push_back(std::move(e));
  });
  write_file(dir / "params.bin", blob.data(), blob.size() * sizeof(float));

  if (optimizer) {
    const auto& st = optimizer->state();
    std::vector<double> moments;
    for (const auto& m : st.first_moment) moments.insert(moments.end(), m.begin(), m.end());
    for (const auto& v : st.second_moment) moments.insert(moments.end(), v.begin(), v.end());
    write_file(dir / "optimizer.bin", moments.data(), moments.size() * sizeof(double));
    man.has_optimizer = true;
    man.optimizer_step = st.step;
  } else if (fs::exists(dir / "optimizer.bin")) {
    fs::remove(dir / "optimizer.bin");
  }

  json tensors = json::array();
  for (const auto& e : man.tensors) {
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}, {"offset", e.offset}});
  }
  const json doc = {{"format_version", man.format_version},
                    {"tensors", tensors},
                    {"config", man.config},
                    {"num_classes", man.num_classes},
                    {"epoch", man.epoch},
                    {"has_optimizer", man.has_optimizer},
                    {"optimizer_step", man.optimizer_step},
                    {"rng_state", man.rng_state}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << doc.dump(2) << '\n';
}

CheckpointManifest read_manifest(const fs::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  const json doc = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw CheckpointError("malformed " + (dir / "manifest.json").string());
  CheckpointManifest man;
  try {
    man.format_version = doc.at("format_version").get<int>();
    if (man.format_version != kCheckpointFormatVersion) {
      throw CheckpointError("checkpoint format version " + std::to_string(man.format_version) + ", expected " +
                            std::to_string(kCheckpointFormatVersion));
    }
    for (const auto& t : doc.at("tensors")) {
      CheckpointEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<std::vector<std::size_t>>();
      e.dtype = t.at("dtype").get<std::string>();
      e.offset = t.at("offset").get<std::size_t>();
      man.tensors.push_back(std::move(e));
    }
    man.config = doc.at("config");
    man.num_classes = doc.at("num_classes").get<std::size_t>();
    man.epoch = doc.at("epoch").get<std::size_t>();
    man.has_optimizer = doc.at("has_optimizer").get<bool>();
    man.optimizer_step = doc.at("optimizer_step").get<std::uint64_t>();
    man.rng_state = doc.at("rng_state").get<std::string>();
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  man.validate();
  return man;
}

namespace {

void fill_parameters(const fs::path& dir, const CheckpointManifest& man, FaceModel& model) {
  const auto blob = read_file(dir / "params.bin");
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : man.tensors) by_name[e.name] = &e;

  std::set<std::string> used;
  model.visit([&](const std::string& name, ad::Tensor<float>& t, ParamGroup) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    const auto& e = *it->second;
    if (e.shape != t.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_string(e.shape) + " in the checkpoint, " +
                            shape_string(t.shape()) + " in the model");
    }
    const std::size_t bytes = t.numel() * sizeof(float);
    if (e.offset + bytes > blob.size()) throw CheckpointError("params.bin is truncated at tensor '" + name + "'");
    std::memcpy(t.mutable_data().data(), blob.data() + e.offset, bytes);
    used.insert(name);
  });
  for (const auto& e : man.tensors) {
    if (!used.count(e.name)) throw CheckpointError("unknown tensor '" + e.name + "' in checkpoint");
  }
}

}  // namespace

void load_parameters(const fs::path& dir, FaceModel& model) {
  fill_parameters(dir, read_manifest(dir), model);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  LoadedCheckpoint out;
  out.manifest = read_manifest(dir);
  try {
    out.config = train_config_from_json(out.manifest.config);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  out.model = init_face_model(out.config, out.manifest.num_classes);
  fill_parameters(dir, out.manifest, out.model);

  if (out.manifest.has_optimizer) {
    const auto bytes = read_file(dir / "optimizer.bin");
    std::size_t total = 0;
    for (const auto& e : out.manifest.tensors) {
      std::size_t n = 1;
      for (auto d : e.shape) n *= d;
      total += n;
    }
    if (bytes.size() != 2 * total * sizeof(double)) throw CheckpointError("optimizer.bin is truncated");
    OptimizerState st;
    st.step = out.manifest.optimizer_step;
    const double* p = reinterpret_cast<const double*>(bytes.data());
    for (int pass = 0; pass < 2; ++pass) {
      auto& dst = pass == 0 ? st.first_moment : st.second_moment;
      for (const auto& e : out.manifest.tensors) {
        std::size_t n = 1;
        for (auto d : e.shape) n *= d;
        dst.emplace_back(p, p + n);
        p += n;
      }
    }
    out.optimizer = std::move(st);
  }
  return out;
}

}  // namespace partvit
