#pragma once

// PPM (P6) image persistence with exact [-1,1] <-> 8-bit mapping.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgal/synthdata.hpp"

namespace dgal {

inline std::uint8_t pixel_to_byte(float v) {
  float y = std::round(127.5f * (v + 1.f));
  return static_cast<std::uint8_t>(std::min(255.f, std::max(0.f, y)));
}

inline float byte_to_pixel(std::uint8_t b) { return float(b) / 127.5f - 1.f; }

inline void write_ppm(const std::string& path, const Image& im) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open '" + path + "'");
  f << "P6\n" << kImageRes << " " << kImageRes << "\n255\n";
  // interleave CHW -> RGB rows
  for (int y = 0; y < kImageRes; ++y)
    for (int x = 0; x < kImageRes; ++x)
      for (int c = 0; c < 3; ++c) f.put(char(pixel_to_byte(im.at(c, y, x))));
  if (!f) throw std::runtime_error("write_ppm: short write to '" + path + "'");
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open '" + path + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6") throw std::runtime_error("read_ppm: not a P6 file: '" + path + "'");
  if (w != kImageRes || h != kImageRes || maxval != 255)
    throw std::runtime_error("read_ppm: unsupported dimensions in '" + path + "'");
  f.get();  // single whitespace after header
  Image im;
  for (int y = 0; y < kImageRes; ++y)
    for (int x = 0; x < kImageRes; ++x)
      for (int c = 0; c < 3; ++c) {
        int b = f.get();
        if (b < 0) throw std::runtime_error("read_ppm: truncated file '" + path + "'");
        im.at(c, y, x) = byte_to_pixel(std::uint8_t(b));
      }
  return im;
}

}  // namespace dgal
