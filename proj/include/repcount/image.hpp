#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "repcount/densitymap.hpp"
#include "repcount/geometry.hpp"

namespace repcount {

// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  int h = 0, w = 0;
  std::vector<uint8_t> data;  // h*w*3

  Image() = default;
  Image(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 3, 0) {}

  uint8_t& at(int r, int c, int ch) {
    return data[(static_cast<size_t>(r) * w + c) * 3 + ch];
  }
  uint8_t at(int r, int c, int ch) const {
    return data[(static_cast<size_t>(r) * w + c) * 3 + ch];
  }
};

inline void save_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_ppm: cannot write " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
}

inline Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_ppm: cannot read " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("load_ppm: unsupported format in " + path);
  in.get();  // single whitespace after header
  Image img(h, w);
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  if (!in) throw std::runtime_error("load_ppm: truncated " + path);
  return img;
}

// Fixed blue->red colormap used for overlay rendering.
inline std::array<uint8_t, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto u8 = [](double v) {
    return static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
  };
  return {u8(255.0 * std::clamp(1.5 * t - 0.25, 0.0, 1.0)),
          u8(255.0 * std::clamp(1.5 - std::abs(3.0 * t - 1.5), 0.0, 1.0)),
          u8(255.0 * std::clamp(1.25 - 1.5 * t, 0.0, 1.0))};
}

// Density heatmap alpha-blended (alpha 0.5) onto the image; density is scaled
// by its own maximum.
inline Image overlay_density(const Image& img, const DensityMap& z,
                             double alpha = 0.5) {
  if (z.h() != img.h || z.w() != img.w)
    throw std::invalid_argument("overlay_density: shape mismatch");
  const double peak = std::max(z.values.maxCoeff(), 1e-12);
  Image out = img;
  for (int r = 0; r < img.h; ++r)
    for (int c = 0; c < img.w; ++c) {
      const auto col = heat_color(z.values(r, c) / peak);
      for (int ch = 0; ch < 3; ++ch)
        out.at(r, c, ch) = static_cast<uint8_t>(
            (1.0 - alpha) * img.at(r, c, ch) + alpha * col[ch]);
    }
  return out;
}

inline void draw_box(Image& img, const Box& b, std::array<uint8_t, 3> color) {
  const int x1 = std::clamp(static_cast<int>(b.x1), 0, img.w - 1);
  const int x2 = std::clamp(static_cast<int>(b.x2), 0, img.w - 1);
  const int y1 = std::clamp(static_cast<int>(b.y1), 0, img.h - 1);
  const int y2 = std::clamp(static_cast<int>(b.y2), 0, img.h - 1);
  for (int x = x1; x <= x2; ++x)
    for (int ch = 0; ch < 3; ++ch) {
      img.at(y1, x, ch) = color[ch];
      img.at(y2, x, ch) = color[ch];
    }
  for (int y = y1; y <= y2; ++y)
    for (int ch = 0; ch < 3; ++ch) {
      img.at(y, x1, ch) = color[ch];
      img.at(y, x2, ch) = color[ch];
    }
}

// Side-by-side composition, used for prediction overlays.
inline Image hstack(const Image& a, const Image& b) {
  if (a.h != b.h) throw std::invalid_argument("hstack: height mismatch");
  Image out(a.h, a.w + b.w);
  for (int r = 0; r < a.h; ++r) {
    for (int c = 0; c < a.w; ++c)
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = a.at(r, c, ch);
    for (int c = 0; c < b.w; ++c)
      for (int ch = 0; ch < 3; ++ch) out.at(r, a.w + c, ch) = b.at(r, c, ch);
  }
  return out;
}

}  // namespace repcount
