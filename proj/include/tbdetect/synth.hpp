#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tbdetect/raster.hpp"
#include "tbdetect/pipeline.hpp"

namespace tb {

// Synthetic bright-field smear scene: curved pink-red rods (the positives,
// rasterized into the mask) plus round distractor blobs in the same palette
// that stay out of the mask, over a noisy blue-cyan background. Geometry
// ranges are defined at a 256-pixel image and scale linearly with image_size.
struct SynthConfig {
  std::size_t image_size = 256;
  std::size_t min_bacilli = 6;
  std::size_t max_bacilli = 14;
  double rod_min_length = 8.0;
  double rod_max_length = 24.0;
  double rod_min_width = 2.0;
  double rod_max_width = 5.0;
  std::size_t distractor_count = 3;
  double noise_level = 8.0;      // per-pixel uniform channel jitter
  double palette_jitter = 18.0;  // per-object color jitter
  bool antialias_image = false;  // soft 1px rim on the image only; mask stays hard
  std::array<std::uint8_t, 3> background{150, 200, 230};
  std::array<std::uint8_t, 3> rod_color{205, 60, 95};
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthObject {
  Box bbox;
  std::size_t area = 0;
  bool bacillus = false;
};

struct SynthScene {
  RasterImage image;
  BinaryMask mask;
  std::vector<SynthObject> rods;
  std::vector<SynthObject> distractors;
  std::size_t requested_rods = 0;
};

// Deterministic in (cfg.seed, image_index); objects are separated by at
// least two pixels so each rod forms its own 8-connected mask component.
SynthScene synth_generate(const SynthConfig& cfg, std::uint64_t image_index = 0);

}  // namespace tb
