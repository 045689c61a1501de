#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "tbdetect/pipeline.hpp"
#include "tbdetect/synth.hpp"
#include "tbdetect/tbvit.hpp"
#include "tbdetect/unet.hpp"

namespace tb {

// Imaging-stage knobs shared by segmentation, detection and evaluation.
// min_area is defined at a 256-pixel patch side and scales quadratically.
struct ImagingConfig {
  std::size_t patch_side = 64;
  double min_area_at_256 = 200.0;
  double binarize_threshold = 0.5;
  bool otsu_dark_foreground = true;
  double roi_overlap_threshold = 0.5;

  double effective_min_area() const { return scaled_min_area(min_area_at_256, patch_side); }
  void validate() const;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::size_t early_stop_patience = 3;
  double min_delta = 1e-4;
  double lr_factor = 0.5;
  std::size_t lr_patience = 2;
  double min_lr = 1e-5;
  double val_fraction = 0.1;
  double focal_gamma = 2.0;  // classifier only
  bool flip_augment = false; // classifier only
  std::uint64_t seed = 42;

  static TrainConfig segmenter_defaults() { return TrainConfig{}; }
  static TrainConfig classifier_defaults() {
    TrainConfig c;
    c.epochs = 25;
    c.batch_size = 32;
    return c;
  }
  void validate() const;
};

// Everything the CLI needs, as one nested document. Unknown keys anywhere in
// the file are rejected.
struct PipelineConfig {
  std::uint64_t seed = 42;
  UNetConfig unet;
  ViTConfig vit;
  TrainConfig train_seg = TrainConfig::segmenter_defaults();
  TrainConfig train_cls = TrainConfig::classifier_defaults();
  SynthConfig synth;
  ImagingConfig imaging;
};

nlohmann::json to_json(const UNetConfig& c);
nlohmann::json to_json(const ViTConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const SynthConfig& c);
nlohmann::json to_json(const ImagingConfig& c);
nlohmann::json to_json(const PipelineConfig& c);

UNetConfig unet_config_from_json(const nlohmann::json& j);
ViTConfig vit_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults);
SynthConfig synth_config_from_json(const nlohmann::json& j);
ImagingConfig imaging_config_from_json(const nlohmann::json& j);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

PipelineConfig load_pipeline_config(const std::string& path);
void save_pipeline_config(const PipelineConfig& cfg, const std::string& path);

}  // namespace tb
