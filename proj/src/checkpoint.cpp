#include "tbdetect/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "tbdetect/config.hpp"

namespace tb {

std::uint32_t crc32_bytes(const void* data, std::size_t length) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < length; ++i) crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

namespace {

using nlohmann::json;

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

void append_le_float(std::vector<std::uint8_t>& out, float v) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  out.push_back(static_cast<std::uint8_t>(bits & 0xFF));
  out.push_back(static_cast<std::uint8_t>((bits >> 8) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((bits >> 16) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((bits >> 24) & 0xFF));
}

float read_le_float(const std::uint8_t* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

void save_store(const ParamStore<float>& store, const json& config, const std::string& kind,
                const std::string& dir, std::optional<double> best_metric,
                const std::string& metric_name) {
  std::filesystem::create_directories(dir);
  std::vector<std::uint8_t> blob;
  json params = json::array();
  std::size_t offset = 0;
  for (const auto& p : store.entries()) {
    for (float v : p.value.data()) {
      if (!std::isfinite(v)) {
        throw IoError("refusing to save non-finite parameter " + p.name);
      }
      append_le_float(blob, v);
    }
    params.push_back({{"name", p.name},
                      {"shape", p.value.shape()},
                      {"offset", offset},
                      {"trainable", p.trainable}});
    offset += p.value.size() * 4;
  }
  const std::string weights_path = dir + "/weights.bin";
  {
    std::ofstream out(weights_path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + weights_path);
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write to " + weights_path);
  }
  json manifest = {{"format_version", kCheckpointFormatVersion},
                   {"model_kind", kind},
                   {"config", config},
                   {"params", params},
                   {"weights_file", "weights.bin"},
                   {"checksum_crc32", hex32(crc32_bytes(blob.data(), blob.size()))}};
  if (best_metric) {
    manifest["best_val_metric"] = *best_metric;
    manifest["metric_name"] = metric_name;
  }
  const std::string manifest_path = dir + "/manifest.json";
  std::ofstream out(manifest_path);
  if (!out) throw IoError("cannot open for writing: " + manifest_path);
  out << manifest.dump(2) << "\n";
}

json load_manifest(const std::string& dir, const std::string& expect_kind) {
  const std::string manifest_path = dir + "/manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open checkpoint manifest: " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest " + manifest_path + ": " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw IoError("checkpoint format version mismatch in " + dir + ": found " +
                  std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointFormatVersion));
  }
  const std::string kind = manifest.value("model_kind", "");
  if (!expect_kind.empty() && kind != expect_kind) {
    throw IoError("checkpoint in " + dir + " holds a '" + kind + "' model, expected '" +
                  expect_kind + "'");
  }
  return manifest;
}

std::vector<std::uint8_t> load_blob(const std::string& dir, const json& manifest) {
  const std::string weights_path = dir + "/" + manifest.value("weights_file", "weights.bin");
  std::ifstream in(weights_path, std::ios::binary);
  if (!in) throw IoError("cannot open weights: " + weights_path);
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  const std::string expect = manifest.value("checksum_crc32", "");
  const std::string actual = hex32(crc32_bytes(blob.data(), blob.size()));
  if (expect != actual) {
    throw IoError("checksum mismatch for " + weights_path + ": manifest says " + expect +
                  ", blob hashes to " + actual);
  }
  return blob;
}

void fill_store(ParamStore<float>& store, const json& manifest,
                const std::vector<std::uint8_t>& blob, const std::string& dir) {
  const json& params = manifest.at("params");
  if (params.size() != store.size()) {
    throw IoError("checkpoint in " + dir + " lists " + std::to_string(params.size()) +
                  " parameters, model has " + std::to_string(store.size()));
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    const json& e = params[i];
    const std::string name = e.at("name").get<std::string>();
    if (name != p.name) {
      throw IoError("checkpoint parameter order mismatch at index " + std::to_string(i) +
                    ": found '" + name + "', expected '" + p.name + "'");
    }
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != p.value.shape()) {
      throw IoError("shape mismatch for parameter '" + name + "': checkpoint has " +
                    shape_str(shape) + ", model config implies " + shape_str(p.value.shape()));
    }
    const std::size_t offset = e.at("offset").get<std::size_t>();
    if (offset != expected_offset) {
      throw IoError("non-contiguous offset for parameter '" + name + "'");
    }
    const std::size_t bytes = p.value.size() * 4;
    if (offset + bytes > blob.size()) {
      throw IoError("weight blob too short for parameter '" + name + "'");
    }
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      p.value[k] = read_le_float(blob.data() + offset + 4 * k);
    }
    expected_offset = offset + bytes;
  }
  if (expected_offset != blob.size()) {
    throw IoError("weight blob in " + dir + " has trailing bytes");
  }
}

}  // namespace

void save_unet_checkpoint(const UNetModel<float>& model, const std::string& dir,
                          std::optional<double> best_val_metric,
                          const std::string& metric_name) {
  save_store(model.params(), to_json(model.config()), "segmenter", dir, best_val_metric,
             metric_name);
}

UNetModel<float> load_unet_checkpoint(const std::string& dir) {
  const json manifest = load_manifest(dir, "segmenter");
  UNetModel<float> model(unet_config_from_json(manifest.at("config")), /*seed=*/0);
  fill_store(model.params(), manifest, load_blob(dir, manifest), dir);
  return model;
}

void save_tbvit_checkpoint(const TbVitModel<float>& model, const std::string& dir,
                           std::optional<double> best_val_metric,
                           const std::string& metric_name) {
  save_store(model.params(), to_json(model.config()), "classifier", dir, best_val_metric,
             metric_name);
}

TbVitModel<float> load_tbvit_checkpoint(const std::string& dir) {
  const json manifest = load_manifest(dir, "classifier");
  TbVitModel<float> model(vit_config_from_json(manifest.at("config")), /*seed=*/0);
  fill_store(model.params(), manifest, load_blob(dir, manifest), dir);
  return model;
}

CheckpointInfo read_checkpoint_info(const std::string& dir) {
  const json manifest = load_manifest(dir, "");
  CheckpointInfo info;
  info.model_kind = manifest.value("model_kind", "");
  info.format_version = manifest.value("format_version", -1);
  if (manifest.contains("best_val_metric")) {
    info.best_val_metric = manifest.at("best_val_metric").get<double>();
    info.metric_name = manifest.value("metric_name", "");
  }
  return info;
}

}  // namespace tb
