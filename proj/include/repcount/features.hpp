#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <vector>

#include "repcount/autodiff.hpp"
#include "repcount/image.hpp"

namespace repcount {

struct FeatureMap {
  ad::Tensor values;  // {C, Hf, Wf}
  double stride = 16;

  int channels() const { return values.dim(0); }
  int hf() const { return values.dim(1); }
  int wf() const { return values.dim(2); }
};

// Adapter interface so a real pretrained backbone can be substituted.
// Implementations must be deterministic and frozen: no optimizer ever touches
// their parameters.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual FeatureMap extract(const Image& img) const = 0;
  virtual int channels() const = 0;
  virtual double stride() const = 0;
};

namespace detail {

// Plain strided convolution on a {C,H,W} buffer; relu optional.
inline ad::Tensor conv_strided(const ad::Tensor& x, const ad::Tensor& w,
                               int stride, int pad, bool relu) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), k = w.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  ad::Tensor out = ad::Tensor::zeros({O, Ho, Wo});
  for (int o = 0; o < O; ++o)
    for (int r = 0; r < Ho; ++r)
      for (int c = 0; c < Wo; ++c) {
        double acc = 0;
        for (int ci = 0; ci < C; ++ci)
          for (int u = 0; u < k; ++u) {
            const int rr = r * stride + u - pad;
            if (rr < 0 || rr >= H) continue;
            for (int v = 0; v < k; ++v) {
              const int cc = c * stride + v - pad;
              if (cc < 0 || cc >= W) continue;
              acc += x.data[(static_cast<Eigen::Index>(ci) * H + rr) * W + cc] *
                     w.data[((static_cast<Eigen::Index>(o) * C + ci) * k + u) * k + v];
            }
          }
        out.data[(static_cast<Eigen::Index>(o) * Ho + r) * Wo + c] =
            relu ? std::max(acc, 0.0) : acc;
      }
  return out;
}

inline ad::Tensor he_init(std::vector<int> shape, std::mt19937_64& rng) {
  ad::Tensor t = ad::Tensor::zeros(std::move(shape));
  const double fan_in = static_cast<double>(t.dim(1)) * t.dim(2) * t.dim(3);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = dist(rng);
  return t;
}

}  // namespace detail

// Three fixed conv+downsample stages (strides 4,2,2 -> total 16), weights
// drawn once from a seeded He-style initialization and never updated. Output
// is normalized to unit RMS per image.
class ToyBackbone : public FeatureExtractor {
 public:
  explicit ToyBackbone(int channels = 64, uint64_t seed = 0x7ba5eULL)
      : channels_(channels) {
    std::mt19937_64 rng(seed);
    w1_ = detail::he_init({16, 3, 5, 5}, rng);
    w2_ = detail::he_init({32, 16, 3, 3}, rng);
    w3_ = detail::he_init({channels, 32, 3, 3}, rng);
  }

  FeatureMap extract(const Image& img) const override {
    // pad right/bottom to a stride multiple
    const int H = ((img.h + 15) / 16) * 16;
    const int W = ((img.w + 15) / 16) * 16;
    ad::Tensor x = ad::Tensor::zeros({3, H, W});
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < img.h; ++r)
        for (int c = 0; c < img.w; ++c)
          x.data[(static_cast<Eigen::Index>(ch) * H + r) * W + c] =
              img.at(r, c, ch) / 255.0;
    ad::Tensor s1 = detail::conv_strided(x, w1_, 4, 2, true);
    ad::Tensor s2 = detail::conv_strided(s1, w2_, 2, 1, true);
    ad::Tensor s3 = detail::conv_strided(s2, w3_, 2, 1, false);
    const double rms = std::sqrt(s3.data.square().mean());
    if (rms > 1e-12) s3.data /= rms;
    FeatureMap fm;
    fm.values = std::move(s3);
    fm.stride = 16;
    return fm;
  }

  int channels() const override { return channels_; }
  double stride() const override { return 16; }

 private:
  int channels_;
  ad::Tensor w1_, w2_, w3_;
};

// Sinusoidal embeddings: first d/2 components depend only on the row, last
// d/2 only on the column. Returned as (hf*wf, d), row-major location order.
inline Eigen::MatrixXd positional_embeddings(int hf, int wf, int d) {
  if (d % 2 != 0)
    throw std::invalid_argument("positional_embeddings: d must be even");
  const int m = d / 2;
  auto axis_embed = [m](int pos) {
    Eigen::VectorXd e(m);
    for (int j = 0; j < m; ++j) {
      const double freq = std::pow(10000.0, -2.0 * (j / 2) / m);
      e[j] = (j % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
    return e;
  };
  Eigen::MatrixXd out(static_cast<Eigen::Index>(hf) * wf, d);
  for (int r = 0; r < hf; ++r) {
    const Eigen::VectorXd re = axis_embed(r);
    for (int c = 0; c < wf; ++c) {
      out.row(static_cast<Eigen::Index>(r) * wf + c).head(m) = re;
      out.row(static_cast<Eigen::Index>(r) * wf + c).tail(m) = axis_embed(c);
    }
  }
  return out;
}

// X = S + pos, with an optional fixed 1x1 projection when C != d.
inline Eigen::MatrixXd to_sequence(const FeatureMap& fm,
                                   const Eigen::MatrixXd& pos,
                                   const Eigen::MatrixXd* projection = nullptr) {
  const int C = fm.channels(), hf = fm.hf(), wf = fm.wf();
  const int n = hf * wf;
  Eigen::MatrixXd s(n, C);
  for (int r = 0; r < hf; ++r)
    for (int c = 0; c < wf; ++c)
      for (int ch = 0; ch < C; ++ch)
        s(static_cast<Eigen::Index>(r) * wf + c, ch) =
            fm.values.data[(static_cast<Eigen::Index>(ch) * hf + r) * wf + c];
  if (projection != nullptr) s = s * (*projection);
  if (s.cols() != pos.cols() || s.rows() != pos.rows())
    throw std::invalid_argument("to_sequence: shape mismatch with embeddings");
  return s + pos;
}

// Inverse reshape of a (n,d) sequence back to a {d,hf,wf} spatial layout.
inline ad::Tensor from_sequence(const Eigen::MatrixXd& u, int hf, int wf) {
  if (u.rows() != static_cast<Eigen::Index>(hf) * wf)
    throw std::invalid_argument("from_sequence: shape mismatch");
  const int d = static_cast<int>(u.cols());
  ad::Tensor out = ad::Tensor::zeros({d, hf, wf});
  for (int r = 0; r < hf; ++r)
    for (int c = 0; c < wf; ++c)
      for (int ch = 0; ch < d; ++ch)
        out.data[(static_cast<Eigen::Index>(ch) * hf + r) * wf + c] =
            u(static_cast<Eigen::Index>(r) * wf + c, ch);
  return out;
}

}  // namespace repcount
