#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "flowfit/scene_renderer.hpp"

namespace flowfit {

inline uint8_t to_u8(float v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Rounds every channel to the nearest multiple of 1/255 so in-memory frames
// match what an 8-bit image file stores.
inline void quantize_u8(Image& img) {
  for (float& v : img.data) v = static_cast<float>(to_u8(v)) / 255.0f;
}

// Binary PPM (P6), 8 bits per channel.
inline void save_ppm(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> bytes(img.data.size());
  for (size_t k = 0; k < bytes.size(); ++k) bytes[k] = to_u8(img.data[k]);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed: " + path);
}

inline Image load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open image " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic;
  auto skip_comments = [&] {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      is >> std::ws;
    }
  };
  skip_comments();
  is >> w;
  skip_comments();
  is >> h;
  skip_comments();
  is >> maxval;
  if (!is || magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
    throw FormatError(path + ": expected an 8-bit binary PPM");
  }
  is.get();
  Image img(h, w);
  std::vector<uint8_t> bytes(img.data.size());
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw FormatError(path + ": truncated image");
  for (size_t k = 0; k < bytes.size(); ++k) img.data[k] = static_cast<float>(bytes[k]) / 255.0f;
  return img;
}

}  // namespace flowfit
