#pragma once

#include <Eigen/Dense>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "repcount/autodiff.hpp"
#include "repcount/densitymap.hpp"
#include "repcount/features.hpp"
#include "repcount/geometry.hpp"

namespace repcount {

struct DpnConfig {
  // channel widths of the five conv stages; x2 upsampling after stages 1-3,
  // then an exact bilinear resize to the image size
  std::vector<int> channels = {32, 32, 16, 16, 1};
  int roi_size = 3;  // P
  double init_std = 1e-3;
};

struct DpnParams {
  DpnConfig cfg;
  std::vector<ad::Tensor> conv_w;  // {out, in, 3, 3}
  std::vector<ad::Tensor> conv_b;

  static DpnParams init(const DpnConfig& cfg, std::mt19937_64& rng) {
    if (cfg.channels.size() != 5 || cfg.channels.back() != 1)
      throw std::invalid_argument("DpnParams: need 5 conv stages ending in 1 channel");
    DpnParams p;
    p.cfg = cfg;
    std::normal_distribution<double> dist(0.0, cfg.init_std);
    int in_ch = 1;
    for (int out_ch : cfg.channels) {
      ad::Tensor w = ad::Tensor::zeros({out_ch, in_ch, 3, 3});
      for (Eigen::Index i = 0; i < w.data.size(); ++i) w.data[i] = dist(rng);
      p.conv_w.push_back(std::move(w));
      p.conv_b.push_back(ad::Tensor::zeros({out_ch}));
      in_ch = out_ch;
    }
    return p;
  }

  std::vector<std::pair<std::string, ad::Tensor*>> named_params() {
    std::vector<std::pair<std::string, ad::Tensor*>> out;
    for (size_t i = 0; i < conv_w.size(); ++i) {
      out.emplace_back("conv" + std::to_string(i) + "_w", &conv_w[i]);
      out.emplace_back("conv" + std::to_string(i) + "_b", &conv_b[i]);
    }
    return out;
  }
};

// ROI pooling of an exemplar box (image coordinates) against a feature map on
// the tape; the box is mapped to feature coordinates by the stride.
inline int roi_pool_box(ad::Tape& tape, int fm_node, const FeatureMap& fm,
                        const Box& box, int p) {
  const double s = fm.stride;
  return tape.roi_pool(fm_node, box.x1 / s, box.y1 / s, box.x2 / s, box.y2 / s, p);
}

struct DpnNodes {
  std::vector<int> param_ids;
  int corr = -1;     // (1, Hf, Wf) input correlation map
  int density = -1;  // (1, H, W) output
};

inline std::vector<int> register_dpn_params(ad::Tape& tape, DpnParams& params,
                                            bool trainable) {
  std::vector<int> ids;
  auto registry = params.named_params();
  for (auto& [name, tensor] : registry)
    ids.push_back(trainable ? tape.param(*tensor) : tape.constant(*tensor));
  return ids;
}

// Five conv stages with x2 upsampling after stages 1-3, ReLU between stages
// and as the final >= 0 clamp, then an exact bilinear resize to the image.
// Parameter node ids may be shared across several forwards on one tape.
inline DpnNodes dpn_forward_with(ad::Tape& tape, const std::vector<int>& param_ids,
                                 int corr_node, int image_h, int image_w) {
  DpnNodes out;
  out.corr = corr_node;
  out.param_ids = param_ids;
  int h = corr_node;
  for (size_t stage = 0; stage < 5; ++stage) {
    h = tape.conv2d(h, param_ids[stage * 2], param_ids[stage * 2 + 1]);
    h = tape.relu(h);
    if (stage < 3) h = tape.upsample2x(h);
  }
  out.density = tape.bilinear_resize(h, image_h, image_w);
  return out;
}

inline DpnNodes dpn_forward(ad::Tape& tape, DpnParams& params, int corr_node,
                            int image_h, int image_w,
                            bool params_trainable = true) {
  return dpn_forward_with(tape, register_dpn_params(tape, params, params_trainable),
                          corr_node, image_h, image_w);
}

inline DensityMap density_from_node(const ad::Tape& tape, int node) {
  const ad::Tensor& t = tape.value(node);
  DensityMap z;
  z.values.resize(t.dim(1), t.dim(2));
  for (int r = 0; r < t.dim(1); ++r)
    for (int c = 0; c < t.dim(2); ++c)
      z.values(r, c) = t.data[static_cast<Eigen::Index>(r) * t.dim(2) + c];
  return z;
}

// (1/(H*W)) * sum (z - z*)^2 as a tape node.
inline int mse_loss(ad::Tape& tape, int density_node, const DensityMap& target) {
  const ad::Tensor& z = tape.value(density_node);
  if (z.dim(1) != target.h() || z.dim(2) != target.w())
    throw std::invalid_argument("mse_loss: shape mismatch");
  Eigen::ArrayXd flat(z.size());
  for (int r = 0; r < target.h(); ++r)
    for (int c = 0; c < target.w(); ++c)
      flat[static_cast<Eigen::Index>(r) * target.w() + c] = target.values(r, c);
  return tape.mse(density_node, flat);
}

// Convenience inference path: ROI pool the exemplar, correlate, decode.
inline DensityMap predict_density(ad::Tape& tape, DpnParams& params,
                                  const FeatureMap& fm, const Box& exemplar,
                                  int image_h, int image_w) {
  const int fm_node = tape.constant(fm.values);
  const int pooled = roi_pool_box(tape, fm_node, fm, exemplar, params.cfg.roi_size);
  const int corr = tape.correlate(fm_node, pooled);
  DpnNodes nodes = dpn_forward(tape, params, corr, image_h, image_w, false);
  return density_from_node(tape, nodes.density);
}

}  // namespace repcount
