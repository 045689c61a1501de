#pragma once

#include <optional>
#include <string>

#include "tbdetect/tbvit.hpp"
#include "tbdetect/unet.hpp"

namespace tb {

// On-disk layout: <dir>/manifest.json + <dir>/weights.bin. The manifest
// records kind, full model configuration, the ordered parameter table
// (name, shape, byte offset, trainable) and a CRC-32 of the weight blob.
// Weights are little-endian 32-bit floats concatenated in table order, so
// save -> load -> forward reproduces the original bitwise.
inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointInfo {
  std::string model_kind;  // "segmenter" | "classifier"
  int format_version = 0;
  std::optional<double> best_val_metric;
  std::string metric_name;
};

void save_unet_checkpoint(const UNetModel<float>& model, const std::string& dir,
                          std::optional<double> best_val_metric = std::nullopt,
                          const std::string& metric_name = "");
UNetModel<float> load_unet_checkpoint(const std::string& dir);

void save_tbvit_checkpoint(const TbVitModel<float>& model, const std::string& dir,
                           std::optional<double> best_val_metric = std::nullopt,
                           const std::string& metric_name = "");
TbVitModel<float> load_tbvit_checkpoint(const std::string& dir);

CheckpointInfo read_checkpoint_info(const std::string& dir);

std::uint32_t crc32_bytes(const void* data, std::size_t length);

}  // namespace tb
