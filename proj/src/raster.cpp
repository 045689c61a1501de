#include "tbdetect/raster.hpp"

#include <cstdio>
#include <fstream>

namespace tb {

namespace {

void skip_header_space(std::istream& in) {
  // whitespace and '#' comment lines
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      in.get();
    } else {
      return;
    }
  }
}

std::size_t read_header_value(std::istream& in, const std::string& path) {
  skip_header_space(in);
  std::size_t v = 0;
  if (!(in >> v)) throw IoError("malformed raster header in " + path);
  return v;
}

}  // namespace

void write_ppm(const RasterImage& image, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.data.data()),
            static_cast<std::streamsize>(image.data.size()));
  if (!out) throw IoError("short write to " + path);
}

RasterImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError("not a binary PPM (P6): " + path);
  const std::size_t w = read_header_value(in, path);
  const std::size_t h = read_header_value(in, path);
  const std::size_t maxval = read_header_value(in, path);
  if (maxval != 255) throw IoError("unsupported maxval " + std::to_string(maxval) + " in " + path);
  in.get();  // single whitespace after maxval
  RasterImage img(w, h);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.data.size())) {
    throw IoError("truncated pixel data in " + path);
  }
  return img;
}

void write_pgm(const BinaryMask& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  std::vector<std::uint8_t> bytes(mask.bits.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.bits[i] ? 255 : 0;
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

BinaryMask read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw IoError("not a binary PGM (P5): " + path);
  const std::size_t w = read_header_value(in, path);
  const std::size_t h = read_header_value(in, path);
  const std::size_t maxval = read_header_value(in, path);
  if (maxval == 0 || maxval > 255) {
    throw IoError("unsupported maxval " + std::to_string(maxval) + " in " + path);
  }
  in.get();
  std::vector<std::uint8_t> bytes(w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError("truncated pixel data in " + path);
  }
  BinaryMask mask(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) mask.bits[i] = bytes[i] ? 1 : 0;
  return mask;
}

}  // namespace tb
