#include "tbdetect/config.hpp"

#include <fstream>
#include <set>

namespace tb {

void ImagingConfig::validate() const {
  if (patch_side == 0) throw ContractViolation("imaging.patch_side must be positive");
  if (min_area_at_256 < 0) throw ContractViolation("imaging.min_area_at_256 must be >= 0");
  if (binarize_threshold < 0 || binarize_threshold > 1) {
    throw ContractViolation("imaging.binarize_threshold must lie in [0,1]");
  }
  if (roi_overlap_threshold < 0 || roi_overlap_threshold > 1) {
    throw ContractViolation("imaging.roi_overlap_threshold must lie in [0,1]");
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractViolation("train.epochs must be >= 1");
  if (batch_size < 1) throw ContractViolation("train.batch_size must be >= 1");
  if (learning_rate <= 0) throw ContractViolation("train.learning_rate must be positive");
  if (val_fraction <= 0 || val_fraction >= 1) {
    throw ContractViolation("train.val_fraction must lie in (0,1)");
  }
  if (early_stop_patience < 1) throw ContractViolation("train.early_stop_patience must be >= 1");
  if (lr_factor <= 0 || lr_factor >= 1) throw ContractViolation("train.lr_factor must lie in (0,1)");
  if (min_lr <= 0) throw ContractViolation("train.min_lr must be positive");
  if (focal_gamma < 0) throw ContractViolation("train.focal_gamma must be >= 0");
}

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& section) {
  if (!j.is_object()) throw IoError("config section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw IoError("unknown key '" + it.key() + "' in config section '" + section + "'");
    }
  }
}

template <typename T>
void read_into(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_color(const json& j, const char* key, std::array<std::uint8_t, 3>& out) {
  if (!j.contains(key)) return;
  const auto arr = j.at(key);
  if (!arr.is_array() || arr.size() != 3) {
    throw IoError(std::string("config key '") + key + "' must be a 3-element array");
  }
  for (std::size_t i = 0; i < 3; ++i) out[i] = arr[i].get<std::uint8_t>();
}

}  // namespace

nlohmann::json to_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"base_channels", c.base_channels},
          {"depth", c.depth},
          {"dropout_rate", c.dropout_rate},
          {"patch_side", c.patch_side}};
}

nlohmann::json to_json(const ViTConfig& c) {
  return {{"roi_side", c.roi_side},
          {"vit_patch", c.vit_patch},
          {"embed_dim", c.embed_dim},
          {"num_heads", c.num_heads},
          {"num_layers", c.num_layers},
          {"mlp_dim", c.mlp_dim},
          {"dropout_rate", c.dropout_rate},
          {"num_classes", c.num_classes}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"early_stop_patience", c.early_stop_patience},
          {"min_delta", c.min_delta},
          {"lr_factor", c.lr_factor},
          {"lr_patience", c.lr_patience},
          {"min_lr", c.min_lr},
          {"val_fraction", c.val_fraction},
          {"focal_gamma", c.focal_gamma},
          {"flip_augment", c.flip_augment},
          {"seed", c.seed}};
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"image_size", c.image_size},
          {"min_bacilli", c.min_bacilli},
          {"max_bacilli", c.max_bacilli},
          {"rod_min_length", c.rod_min_length},
          {"rod_max_length", c.rod_max_length},
          {"rod_min_width", c.rod_min_width},
          {"rod_max_width", c.rod_max_width},
          {"distractor_count", c.distractor_count},
          {"noise_level", c.noise_level},
          {"palette_jitter", c.palette_jitter},
          {"antialias_image", c.antialias_image},
          {"background", {c.background[0], c.background[1], c.background[2]}},
          {"rod_color", {c.rod_color[0], c.rod_color[1], c.rod_color[2]}},
          {"seed", c.seed}};
}

nlohmann::json to_json(const ImagingConfig& c) {
  return {{"patch_side", c.patch_side},
          {"min_area_at_256", c.min_area_at_256},
          {"binarize_threshold", c.binarize_threshold},
          {"otsu_dark_foreground", c.otsu_dark_foreground},
          {"roi_overlap_threshold", c.roi_overlap_threshold}};
}

nlohmann::json to_json(const PipelineConfig& c) {
  return {{"seed", c.seed},          {"unet", to_json(c.unet)},
          {"vit", to_json(c.vit)},   {"train_seg", to_json(c.train_seg)},
          {"train_cls", to_json(c.train_cls)}, {"synth", to_json(c.synth)},
          {"imaging", to_json(c.imaging)}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"in_channels", "base_channels", "depth", "dropout_rate", "patch_side"},
                      "unet");
  UNetConfig c;
  read_into(j, "in_channels", c.in_channels);
  read_into(j, "base_channels", c.base_channels);
  read_into(j, "depth", c.depth);
  read_into(j, "dropout_rate", c.dropout_rate);
  read_into(j, "patch_side", c.patch_side);
  c.validate();
  return c;
}

ViTConfig vit_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"roi_side", "vit_patch", "embed_dim", "num_heads", "num_layers", "mlp_dim",
                       "dropout_rate", "num_classes"},
                      "vit");
  ViTConfig c;
  read_into(j, "roi_side", c.roi_side);
  read_into(j, "vit_patch", c.vit_patch);
  read_into(j, "embed_dim", c.embed_dim);
  read_into(j, "num_heads", c.num_heads);
  read_into(j, "num_layers", c.num_layers);
  read_into(j, "mlp_dim", c.mlp_dim);
  read_into(j, "dropout_rate", c.dropout_rate);
  read_into(j, "num_classes", c.num_classes);
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults) {
  reject_unknown_keys(j,
                      {"epochs", "batch_size", "learning_rate", "early_stop_patience",
                       "min_delta", "lr_factor", "lr_patience", "min_lr", "val_fraction",
                       "focal_gamma", "flip_augment", "seed"},
                      "train");
  TrainConfig c = defaults;
  read_into(j, "epochs", c.epochs);
  read_into(j, "batch_size", c.batch_size);
  read_into(j, "learning_rate", c.learning_rate);
  read_into(j, "early_stop_patience", c.early_stop_patience);
  read_into(j, "min_delta", c.min_delta);
  read_into(j, "lr_factor", c.lr_factor);
  read_into(j, "lr_patience", c.lr_patience);
  read_into(j, "min_lr", c.min_lr);
  read_into(j, "val_fraction", c.val_fraction);
  read_into(j, "focal_gamma", c.focal_gamma);
  read_into(j, "flip_augment", c.flip_augment);
  read_into(j, "seed", c.seed);
  c.validate();
  return c;
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"image_size", "min_bacilli", "max_bacilli", "rod_min_length",
                       "rod_max_length", "rod_min_width", "rod_max_width", "distractor_count",
                       "noise_level", "palette_jitter", "antialias_image", "background",
                       "rod_color", "seed"},
                      "synth");
  SynthConfig c;
  read_into(j, "image_size", c.image_size);
  read_into(j, "min_bacilli", c.min_bacilli);
  read_into(j, "max_bacilli", c.max_bacilli);
  read_into(j, "rod_min_length", c.rod_min_length);
  read_into(j, "rod_max_length", c.rod_max_length);
  read_into(j, "rod_min_width", c.rod_min_width);
  read_into(j, "rod_max_width", c.rod_max_width);
  read_into(j, "distractor_count", c.distractor_count);
  read_into(j, "noise_level", c.noise_level);
  read_into(j, "palette_jitter", c.palette_jitter);
  read_into(j, "antialias_image", c.antialias_image);
  read_color(j, "background", c.background);
  read_color(j, "rod_color", c.rod_color);
  read_into(j, "seed", c.seed);
  c.validate();
  return c;
}

ImagingConfig imaging_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"patch_side", "min_area_at_256", "binarize_threshold",
                       "otsu_dark_foreground", "roi_overlap_threshold"},
                      "imaging");
  ImagingConfig c;
  read_into(j, "patch_side", c.patch_side);
  read_into(j, "min_area_at_256", c.min_area_at_256);
  read_into(j, "binarize_threshold", c.binarize_threshold);
  read_into(j, "otsu_dark_foreground", c.otsu_dark_foreground);
  read_into(j, "roi_overlap_threshold", c.roi_overlap_threshold);
  c.validate();
  return c;
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(
      j, {"seed", "unet", "vit", "train_seg", "train_cls", "synth", "imaging"}, "pipeline");
  PipelineConfig c;
  read_into(j, "seed", c.seed);
  if (j.contains("unet")) c.unet = unet_config_from_json(j.at("unet"));
  if (j.contains("vit")) c.vit = vit_config_from_json(j.at("vit"));
  if (j.contains("train_seg")) {
    c.train_seg = train_config_from_json(j.at("train_seg"), TrainConfig::segmenter_defaults());
  }
  if (j.contains("train_cls")) {
    c.train_cls = train_config_from_json(j.at("train_cls"), TrainConfig::classifier_defaults());
  }
  if (j.contains("synth")) c.synth = synth_config_from_json(j.at("synth"));
  if (j.contains("imaging")) c.imaging = imaging_config_from_json(j.at("imaging"));
  return c;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed config " + path + ": " + e.what());
  }
  try {
    return pipeline_config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("invalid config " + path + ": " + e.what());
  }
}

void save_pipeline_config(const PipelineConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << to_json(cfg).dump(2) << "\n";
}

}  // namespace tb
