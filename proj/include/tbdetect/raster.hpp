#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tbdetect/error.hpp"

namespace tb {

// 8-bit RGB image, row-major, channel-interleaved.
struct RasterImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;

  RasterImage() = default;
  RasterImage(std::size_t w, std::size_t h) : width(w), height(h), data(w * h * 3, 0) {}

  static RasterImage filled(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g,
                            std::uint8_t b) {
    RasterImage img(w, h);
    for (std::size_t i = 0; i < w * h; ++i) {
      img.data[3 * i] = r;
      img.data[3 * i + 1] = g;
      img.data[3 * i + 2] = b;
    }
    return img;
  }

  std::uint8_t* pixel(std::size_t x, std::size_t y) { return data.data() + 3 * (y * width + x); }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const {
    return data.data() + 3 * (y * width + x);
  }

  bool operator==(const RasterImage& o) const {
    return width == o.width && height == o.height && data == o.data;
  }
};

// Per-pixel foreground mask; one byte per pixel holding 0 or 1.
struct BinaryMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t w, std::size_t h) : width(w), height(h), bits(w * h, 0) {}

  std::uint8_t at(std::size_t x, std::size_t y) const { return bits[y * width + x]; }
  void set(std::size_t x, std::size_t y, std::uint8_t v) { bits[y * width + x] = v ? 1 : 0; }

  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (std::uint8_t b : bits) n += b;
    return n;
  }

  bool operator==(const BinaryMask& o) const {
    return width == o.width && height == o.height && bits == o.bits;
  }
};

// Binary PPM (P6) / PGM (P5) with maxval 255. Masks are stored as 0/255 and
// any nonzero sample reads back as foreground.
void write_ppm(const RasterImage& image, const std::string& path);
RasterImage read_ppm(const std::string& path);
void write_pgm(const BinaryMask& mask, const std::string& path);
BinaryMask read_pgm(const std::string& path);

}  // namespace tb
