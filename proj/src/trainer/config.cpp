#include "partvit/trainer/config.hpp"

#include "partvit/errors.hpp"

namespace partvit {

using json = nlohmann::json;

void TrainConfig::validate() const {
  model.validate();
  augment.validate();
  cosface.validate();
  optimizer.validate();
  schedule.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (workers == 0) throw ConfigError("workers must be positive");
}

json to_json(const ModelConfig& m) {
  return {{"preset", m.preset},
          {"image_height", m.image_height},
          {"image_width", m.image_width},
          {"channels", m.channels},
          {"num_patches", m.num_patches},
          {"patch_size", m.patch_size},
          {"embed_dim", m.embed_dim},
          {"mlp_dim", m.mlp_dim},
          {"depth", m.depth},
          {"heads", m.heads},
          {"head_dim", m.head_dim},
          {"variant", to_string(m.variant)},
          {"pos_encoding", to_string(m.pos_encoding)},
          {"bottleneck_violation", m.bottleneck_violation},
          {"stochastic_depth_prob", m.stochastic_depth_prob},
          {"landmark",
           {{"channels", m.landmark.channels}, {"kernel", m.landmark.kernel}, {"stride", m.landmark.stride}}}};
}

json to_json(const TrainConfig& c) {
  const auto& a = c.augment;
  return {{"model", to_json(c.model)},
          {"augment",
           {{"flip", a.flip},
            {"randaugment", a.randaugment},
            {"resize_crop", a.resize_crop},
            {"stochastic_depth", a.stochastic_depth},
            {"mixup", a.mixup},
            {"cutout", a.cutout},
            {"warmup", a.warmup},
            {"randaugment_ops", a.randaugment_ops},
            {"randaugment_magnitude", a.randaugment_magnitude},
            {"mixup_alpha", a.mixup_alpha},
            {"mixup_prob", a.mixup_prob},
            {"cutout_fraction", a.cutout_fraction},
            {"crop_min", a.crop_min},
            {"crop_max", a.crop_max}}},
          {"cosface",
           {{"margin", c.cosface.margin},
            {"scale", c.cosface.scale},
            {"scale_mode", to_string(c.cosface.scale_mode)}}},
          {"optimizer",
           {{"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"weight_decay_vit", c.optimizer.weight_decay_vit},
            {"weight_decay_landmark", c.optimizer.weight_decay_landmark}}},
          {"schedule",
           {{"base_lr", c.schedule.base_lr},
            {"min_lr", c.schedule.min_lr},
            {"warmup_epochs", c.schedule.warmup_epochs},
            {"total_epochs", c.schedule.total_epochs}}},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"workers", c.workers},
          {"heldout_batch", c.heldout_batch}};
}

namespace {

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

// Overlays `src` on `dst`, refusing keys `dst` does not have.
void merge_strict(json& dst, const json& src, const std::string& prefix) {
  if (!src.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = join(prefix, it.key());
    if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = dst[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

template <typename V>
V read(const json& doc, const std::string& section, const std::string& key) {
  const json& v = section.empty() ? doc.at(key) : doc.at(section).at(key);
  try {
    if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
      if (v.is_number_float() || (v.is_number_integer() && v.get<long long>() < 0)) {
        throw ConfigError("expected a non-negative integer");
      }
    }
    return v.get<V>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + join(section, key) + "' has the wrong type (" +
                      std::string(v.type_name()) + ")");
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + join(section, key) + "': " + e.what());
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& m) {
  ModelConfig c;
  c.preset = read<std::string>(m, "", "preset");
  c.image_height = read<std::size_t>(m, "", "image_height");
  c.image_width = read<std::size_t>(m, "", "image_width");
  c.channels = read<std::size_t>(m, "", "channels");
  c.num_patches = read<std::size_t>(m, "", "num_patches");
  c.patch_size = read<std::size_t>(m, "", "patch_size");
  c.embed_dim = read<std::size_t>(m, "", "embed_dim");
  c.mlp_dim = read<std::size_t>(m, "", "mlp_dim");
  c.depth = read<std::size_t>(m, "", "depth");
  c.heads = read<std::size_t>(m, "", "heads");
  c.head_dim = read<std::size_t>(m, "", "head_dim");
  c.variant = parse_variant(read<std::string>(m, "", "variant"));
  c.pos_encoding = parse_pos_encoding(read<std::string>(m, "", "pos_encoding"));
  c.bottleneck_violation = read<bool>(m, "", "bottleneck_violation");
  c.stochastic_depth_prob = read<double>(m, "", "stochastic_depth_prob");
  c.landmark.channels = read<std::vector<std::size_t>>(m, "landmark", "channels");
  c.landmark.kernel = read<std::size_t>(m, "landmark", "kernel");
  c.landmark.stride = read<std::size_t>(m, "landmark", "stride");
  return c;
}

TrainConfig train_config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("training config must be a JSON object");
  std::string preset = "fvit-tiny";
  if (doc.contains("model") && doc["model"].is_object() && doc["model"].contains("preset")) {
    if (!doc["model"]["preset"].is_string()) throw ConfigError("config key 'model.preset' must be a string");
    preset = doc["model"]["preset"].get<std::string>();
  }
  TrainConfig base;
  base.model = make_preset(preset);
  json merged = to_json(base);
  merge_strict(merged, doc, "");

  TrainConfig c;
  try {
    c.model = model_config_from_json(merged["model"]);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  const bool retile = doc.contains("model") && doc["model"].contains("num_patches") &&
                      !doc["model"].contains("patch_size");
  if (retile) c.model = with_patch_count(c.model, c.model.num_patches);

  auto& a = c.augment;
  a.flip = read<bool>(merged, "augment", "flip");
  a.randaugment = read<bool>(merged, "augment", "randaugment");
  a.resize_crop = read<bool>(merged, "augment", "resize_crop");
  a.stochastic_depth = read<bool>(merged, "augment", "stochastic_depth");
  a.mixup = read<bool>(merged, "augment", "mixup");
  a.cutout = read<bool>(merged, "augment", "cutout");
  a.warmup = read<bool>(merged, "augment", "warmup");
  a.randaugment_ops = read<std::size_t>(merged, "augment", "randaugment_ops");
  a.randaugment_magnitude = read<double>(merged, "augment", "randaugment_magnitude");
  a.mixup_alpha = read<double>(merged, "augment", "mixup_alpha");
  a.mixup_prob = read<double>(merged, "augment", "mixup_prob");
  a.cutout_fraction = read<double>(merged, "augment", "cutout_fraction");
  a.crop_min = read<double>(merged, "augment", "crop_min");
  a.crop_max = read<double>(merged, "augment", "crop_max");

  c.cosface.margin = read<double>(merged, "cosface", "margin");
  c.cosface.scale = read<double>(merged, "cosface", "scale");
  c.cosface.scale_mode = parse_scale_mode(read<std::string>(merged, "cosface", "scale_mode"));

  c.optimizer.beta1 = read<double>(merged, "optimizer", "beta1");
  c.optimizer.beta2 = read<double>(merged, "optimizer", "beta2");
  c.optimizer.eps = read<double>(merged, "optimizer", "eps");
  c.optimizer.weight_decay_vit = read<double>(merged, "optimizer", "weight_decay_vit");
  c.optimizer.weight_decay_landmark = read<double>(merged, "optimizer", "weight_decay_landmark");

  c.schedule.base_lr = read<double>(merged, "schedule", "base_lr");
  c.schedule.min_lr = read<double>(merged, "schedule", "min_lr");
  c.schedule.warmup_epochs = read<std::size_t>(merged, "schedule", "warmup_epochs");
  c.schedule.total_epochs = read<std::size_t>(merged, "schedule", "total_epochs");

  c.batch_size = read<std::size_t>(merged, "", "batch_size");
  c.seed = read<std::uint64_t>(merged, "", "seed");
  c.workers = read<std::size_t>(merged, "", "workers");
  c.heldout_batch = read<std::size_t>(merged, "", "heldout_batch");
  return c;
}

void apply_overrides(json& doc, const std::vector<std::string>& overrides) {
  const json schema = to_json(TrainConfig{});
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + ov + "' is not of the form key=value");
    }
    const std::string key = ov.substr(0, eq);
    const std::string text = ov.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    const json* s = &schema;
    json* d = &doc;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!s->is_object() || !s->contains(part)) throw ConfigError("unknown config key '" + key + "'");
      s = &(*s)[part];
      if (!d->is_object()) *d = json::object();
      if (dot == std::string::npos) {
        if (s->is_object()) throw ConfigError("config key '" + key + "' names a section, not a value");
        (*d)[part] = value;
        break;
      }
      d = &(*d)[part];
      start = dot + 1;
    }
  }
}

}  // namespace partvit
