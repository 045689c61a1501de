#pragma once

#include <string>
#include <vector>

#include "tbdetect/raster.hpp"
#include "tbdetect/synth.hpp"

namespace tb {

struct SampleRecord {
  std::string image_path;  // relative to the manifest root
  std::string mask_path;
  std::string split;       // "train" | "test"
};

struct DatasetManifest {
  std::string root;  // directory containing the manifest, filled at load time
  std::size_t patch_side = 64;
  std::string provenance;
  std::vector<SampleRecord> samples;
};

struct Sample {
  std::string name;
  RasterImage image;
  BinaryMask mask;
  std::string split;
};

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const DatasetManifest& manifest, const std::string& path);

// Loads every referenced pair, checks that mask and image dimensions agree
// and normalizes masks to 0/1. Errors name the offending paths.
std::vector<Sample> load_dataset(const DatasetManifest& manifest);

std::vector<Sample> filter_split(const std::vector<Sample>& samples, const std::string& split);

// Renders train+test synthetic scenes under out_dir (images/, masks/) and
// writes manifest.json plus scenes.json with per-image object ground truth.
DatasetManifest generate_synth_dataset(const SynthConfig& cfg, std::size_t train_count,
                                       std::size_t test_count, const std::string& out_dir);

}  // namespace tb
