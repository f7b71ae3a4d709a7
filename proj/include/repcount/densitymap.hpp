#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace repcount {

// Nonnegative H x W field whose sum is an object count.
struct DensityMap {
  Eigen::MatrixXd values;  // (h, w)

  int h() const { return static_cast<int>(values.rows()); }
  int w() const { return static_cast<int>(values.cols()); }
};

struct Dot {
  double x = 0, y = 0;
};
using DotMap = std::vector<Dot>;

inline double count(const DensityMap& z) { return z.values.sum(); }

// Gaussian-blurred dot map. Each dot's kernel is truncated at the image
// boundary (and at 4*sigma support) and renormalized to unit mass, so the
// total sum equals the number of dots.
inline DensityMap render_density(const DotMap& dots, int h, int w,
                                 double sigma = 2.0) {
  if (sigma <= 0) throw std::invalid_argument("render_density: sigma <= 0");
  DensityMap z;
  z.values = Eigen::MatrixXd::Zero(h, w);
  const double radius = 4.0 * sigma;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (const Dot& d : dots) {
    if (d.x < 0 || d.x >= w || d.y < 0 || d.y >= h)
      throw std::invalid_argument("render_density: dot outside image");
    const int r0 = std::max(0, static_cast<int>(std::floor(d.y - radius)));
    const int r1 = std::min(h - 1, static_cast<int>(std::ceil(d.y + radius)));
    const int c0 = std::max(0, static_cast<int>(std::floor(d.x - radius)));
    const int c1 = std::min(w - 1, static_cast<int>(std::ceil(d.x + radius)));
    double mass = 0;
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const double dy = r - d.y, dx = c - d.x;
        mass += std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
    if (mass <= 0) continue;
    const double scale = 1.0 / mass;
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const double dy = r - d.y, dx = c - d.x;
        z.values(r, c) += scale * std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
  }
  return z;
}

// Serialization: row-major little-endian float32 binary plus a sidecar text
// header "<h> <w>" at <path>.hdr.
inline void save_density(const DensityMap& z, const std::string& path) {
  {
    std::ofstream hdr(path + ".hdr");
    if (!hdr) throw std::runtime_error("save_density: cannot write " + path + ".hdr");
    hdr << z.h() << " " << z.w() << "\n";
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_density: cannot write " + path);
  std::vector<float> buf(static_cast<size_t>(z.h()) * z.w());
  size_t i = 0;
  for (int r = 0; r < z.h(); ++r)
    for (int c = 0; c < z.w(); ++c) buf[i++] = static_cast<float>(z.values(r, c));
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline DensityMap load_density(const std::string& path) {
  int h = 0, w = 0;
  {
    std::ifstream hdr(path + ".hdr");
    if (!(hdr >> h >> w) || h <= 0 || w <= 0)
      throw std::runtime_error("load_density: bad header " + path + ".hdr");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_density: cannot read " + path);
  std::vector<float> buf(static_cast<size_t>(h) * w);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw std::runtime_error("load_density: truncated " + path);
  DensityMap z;
  z.values.resize(h, w);
  size_t i = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) z.values(r, c) = buf[i++];
  return z;
}

}  // namespace repcount
