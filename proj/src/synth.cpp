#include "tbdetect/synth.hpp"

#include <algorithm>
#include <cmath>

#include "tbdetect/rng.hpp"

namespace tb {

void SynthConfig::validate() const {
  if (image_size < 32) throw ContractViolation("synthetic image size must be >= 32");
  if (min_bacilli > max_bacilli) throw ContractViolation("min_bacilli exceeds max_bacilli");
  if (rod_min_length <= 0 || rod_min_length > rod_max_length) {
    throw ContractViolation("invalid rod length range");
  }
  if (rod_min_width < 1.0 || rod_min_width > rod_max_width) {
    throw ContractViolation("invalid rod width range");
  }
  if (noise_level < 0 || palette_jitter < 0) {
    throw ContractViolation("noise levels must be >= 0");
  }
}

namespace {

struct Stamp {
  std::vector<std::size_t> pixels;          // hard (mask) pixels
  std::vector<std::pair<std::size_t, double>> rim;  // optional soft rim, alpha in (0,1)
  Box bbox;
  bool ok = false;
};

std::uint8_t clamp_channel(double v) {
  return static_cast<std::uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
}

// Rasterizes a slightly curved capsule (quadratic bezier spine with round
// caps). Pixels are the set within width/2 of the spine samples.
Stamp stamp_rod(double x0, double y0, double x1, double y1, double cx, double cy, double width,
                std::size_t size, std::vector<std::uint8_t>& scratch, bool want_rim) {
  Stamp s;
  const double radius = width / 2.0;
  const double rim_radius = radius + 1.0;
  const double len = std::hypot(x1 - x0, y1 - y0) + 1.0;
  const std::size_t steps = static_cast<std::size_t>(std::ceil(len * 4.0)) + 1;
  double min_x = 1e9, min_y = 1e9, max_x = -1e9, max_y = -1e9;
  std::vector<std::pair<double, double>> samples(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps);
    const double u = 1.0 - t;
    const double px = u * u * x0 + 2.0 * u * t * cx + t * t * x1;
    const double py = u * u * y0 + 2.0 * u * t * cy + t * t * y1;
    samples[i] = {px, py};
    min_x = std::min(min_x, px);
    max_x = std::max(max_x, px);
    min_y = std::min(min_y, py);
    max_y = std::max(max_y, py);
  }
  const double pad = want_rim ? rim_radius : radius;
  if (min_x - pad < 1.0 || min_y - pad < 1.0 || max_x + pad >= static_cast<double>(size) - 1.0 ||
      max_y + pad >= static_cast<double>(size) - 1.0) {
    return s;  // would touch the border
  }
  const std::size_t lo_x = static_cast<std::size_t>(std::floor(min_x - pad));
  const std::size_t hi_x = static_cast<std::size_t>(std::ceil(max_x + pad));
  const std::size_t lo_y = static_cast<std::size_t>(std::floor(min_y - pad));
  const std::size_t hi_y = static_cast<std::size_t>(std::ceil(max_y + pad));
  Box bbox{size, size, 0, 0};
  for (std::size_t y = lo_y; y <= hi_y; ++y) {
    for (std::size_t x = lo_x; x <= hi_x; ++x) {
      double d2 = 1e18;
      for (const auto& [px, py] : samples) {
        const double dx = static_cast<double>(x) - px;
        const double dy = static_cast<double>(y) - py;
        d2 = std::min(d2, dx * dx + dy * dy);
      }
      const double d = std::sqrt(d2);
      const std::size_t idx = y * size + x;
      if (d <= radius) {
        if (!scratch[idx]) {
          scratch[idx] = 1;
          s.pixels.push_back(idx);
          bbox.x_min = std::min(bbox.x_min, x);
          bbox.x_max = std::max(bbox.x_max, x);
          bbox.y_min = std::min(bbox.y_min, y);
          bbox.y_max = std::max(bbox.y_max, y);
        }
      } else if (want_rim && d < rim_radius) {
        s.rim.emplace_back(idx, rim_radius - d);
      }
    }
  }
  for (std::size_t idx : s.pixels) scratch[idx] = 0;
  s.bbox = bbox;
  s.ok = !s.pixels.empty();
  return s;
}

Stamp stamp_disc(double cx, double cy, double radius, std::size_t size,
                 std::vector<std::uint8_t>& scratch, bool want_rim) {
  return stamp_rod(cx, cy, cx, cy, cx, cy, radius * 2.0, size, scratch, want_rim);
}

// No stamped pixel may come within 2 pixels (Chebyshev) of occupied ones, so
// separate objects never become 8-connected.
bool clashes(const Stamp& s, const std::vector<std::uint8_t>& occupied, std::size_t size) {
  for (std::size_t idx : s.pixels) {
    const std::size_t x = idx % size, y = idx / size;
    const std::size_t x0 = x >= 2 ? x - 2 : 0, y0 = y >= 2 ? y - 2 : 0;
    const std::size_t x1 = std::min(x + 2, size - 1), y1 = std::min(y + 2, size - 1);
    for (std::size_t yy = y0; yy <= y1; ++yy) {
      for (std::size_t xx = x0; xx <= x1; ++xx) {
        if (occupied[yy * size + xx]) return true;
      }
    }
  }
  return false;
}

}  // namespace

SynthScene synth_generate(const SynthConfig& cfg, std::uint64_t image_index) {
  cfg.validate();
  SplitMix64 rng = SplitMix64::derive(cfg.seed, image_index);
  const std::size_t size = cfg.image_size;
  const double scale = static_cast<double>(size) / 256.0;

  SynthScene scene;
  scene.image = RasterImage(size, size);
  scene.mask = BinaryMask(size, size);

  // background with per-pixel channel noise
  for (std::size_t i = 0; i < size * size; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double n = cfg.noise_level > 0 ? rng.uniform(-cfg.noise_level, cfg.noise_level) : 0.0;
      scene.image.data[3 * i + c] = clamp_channel(static_cast<double>(cfg.background[c]) + n);
    }
  }

  std::vector<std::uint8_t> occupied(size * size, 0);
  std::vector<std::uint8_t> scratch(size * size, 0);

  const auto paint = [&](const Stamp& s, const std::array<double, 3>& color) {
    for (std::size_t idx : s.pixels) {
      for (std::size_t c = 0; c < 3; ++c) {
        scene.image.data[3 * idx + c] = clamp_channel(color[c]);
      }
      occupied[idx] = 1;
    }
    for (const auto& [idx, alpha] : s.rim) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = scene.image.data[3 * idx + c];
        scene.image.data[3 * idx + c] = clamp_channel(base + alpha * (color[c] - base));
      }
    }
  };

  const auto object_color = [&]() {
    std::array<double, 3> color;
    for (std::size_t c = 0; c < 3; ++c) {
      const double j =
          cfg.palette_jitter > 0 ? rng.uniform(-cfg.palette_jitter, cfg.palette_jitter) : 0.0;
      color[c] = static_cast<double>(cfg.rod_color[c]) + j;
    }
    return color;
  };

  const std::size_t rod_target =
      cfg.min_bacilli +
      static_cast<std::size_t>(rng.next_below(cfg.max_bacilli - cfg.min_bacilli + 1));
  scene.requested_rods = rod_target;

  for (std::size_t r = 0; r < rod_target; ++r) {
    for (int attempt = 0; attempt < 60; ++attempt) {
      const double len = rng.uniform(cfg.rod_min_length, cfg.rod_max_length) * scale;
      const double width = std::max(1.5, rng.uniform(cfg.rod_min_width, cfg.rod_max_width) * scale);
      const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double margin = len / 2.0 + width + 3.0;
      if (2.0 * margin >= static_cast<double>(size)) break;
      const double cx = rng.uniform(margin, static_cast<double>(size) - margin);
      const double cy = rng.uniform(margin, static_cast<double>(size) - margin);
      const double hx = std::cos(theta) * len / 2.0, hy = std::sin(theta) * len / 2.0;
      const double bend = rng.uniform(-len / 5.0, len / 5.0);
      const double ctrl_x = cx - std::sin(theta) * bend;
      const double ctrl_y = cy + std::cos(theta) * bend;
      Stamp s = stamp_rod(cx - hx, cy - hy, cx + hx, cy + hy, ctrl_x, ctrl_y, width, size,
                          scratch, cfg.antialias_image);
      if (!s.ok || clashes(s, occupied, size)) continue;
      paint(s, object_color());
      for (std::size_t idx : s.pixels) scene.mask.bits[idx] = 1;
      scene.rods.push_back(SynthObject{s.bbox, s.pixels.size(), true});
      break;
    }
  }

  for (std::size_t d = 0; d < cfg.distractor_count; ++d) {
    for (int attempt = 0; attempt < 60; ++attempt) {
      const double radius =
          std::max(1.5, rng.uniform(cfg.rod_min_width * 0.9, cfg.rod_max_width * 1.4) * scale);
      const double margin = radius + 4.0;
      const double cx = rng.uniform(margin, static_cast<double>(size) - margin);
      const double cy = rng.uniform(margin, static_cast<double>(size) - margin);
      Stamp s = stamp_disc(cx, cy, radius, size, scratch, cfg.antialias_image);
      if (!s.ok || clashes(s, occupied, size)) continue;
      paint(s, object_color());
      scene.distractors.push_back(SynthObject{s.bbox, s.pixels.size(), false});
      break;
    }
  }
  return scene;
}

}  // namespace tb
