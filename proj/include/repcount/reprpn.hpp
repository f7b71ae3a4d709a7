#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "repcount/autodiff.hpp"
#include "repcount/features.hpp"
#include "repcount/geometry.hpp"

namespace repcount {

struct RepRpnConfig {
  int d = 64;
  int layers = 5;
  int heads = 8;
  int anchors_per_location = 12;
  bool scale_logits = true;    // 1/sqrt(d_head) attention scaling; off = the
                               // literal unscaled softmax(QK^T)V form
  bool layer_norm = true;      // stability deviation from plain stacking
  bool transformer_standard = false;  // residuals + feed-forward sublayers
  double lambda = 1.0;
  double init_std = 1e-3;

  int head_dim() const {
    if (d % heads != 0)
      throw std::invalid_argument("RepRpnConfig: d not divisible by heads");
    return d / heads;
  }
};

struct AttentionLayerParams {
  ad::Tensor wq, wk, wv, wo;      // d x d
  ad::Tensor ff1_w, ff1_b, ff2_w, ff2_b;  // only in transformer_standard mode
};

struct RepRpnParams {
  RepRpnConfig cfg;
  std::vector<AttentionLayerParams> layers;
  ad::Tensor head_obj_w, head_obj_b;  // d x k, k
  ad::Tensor head_rep_w, head_rep_b;  // d x k, k
  ad::Tensor head_box_w, head_box_b;  // d x 4k, 4k

  static RepRpnParams init(const RepRpnConfig& cfg, std::mt19937_64& rng) {
    RepRpnParams p;
    p.cfg = cfg;
    std::normal_distribution<double> dist(0.0, cfg.init_std);
    auto gaussian = [&](std::vector<int> shape) {
      ad::Tensor t = ad::Tensor::zeros(std::move(shape));
      for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = dist(rng);
      return t;
    };
    const int d = cfg.d, k = cfg.anchors_per_location;
    for (int l = 0; l < cfg.layers; ++l) {
      AttentionLayerParams lp;
      lp.wq = gaussian({d, d});
      lp.wk = gaussian({d, d});
      lp.wv = gaussian({d, d});
      lp.wo = gaussian({d, d});
      if (cfg.transformer_standard) {
        lp.ff1_w = gaussian({d, 2 * d});
        lp.ff1_b = ad::Tensor::zeros({2 * d});
        lp.ff2_w = gaussian({2 * d, d});
        lp.ff2_b = ad::Tensor::zeros({d});
      }
      p.layers.push_back(std::move(lp));
    }
    p.head_obj_w = gaussian({d, k});
    p.head_obj_b = ad::Tensor::zeros({k});
    p.head_rep_w = gaussian({d, k});
    p.head_rep_b = ad::Tensor::zeros({k});
    p.head_box_w = gaussian({d, 4 * k});
    p.head_box_b = ad::Tensor::zeros({4 * k});
    return p;
  }

  std::vector<std::pair<std::string, ad::Tensor*>> named_params() {
    std::vector<std::pair<std::string, ad::Tensor*>> out;
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      out.emplace_back(pre + "wq", &layers[l].wq);
      out.emplace_back(pre + "wk", &layers[l].wk);
      out.emplace_back(pre + "wv", &layers[l].wv);
      out.emplace_back(pre + "wo", &layers[l].wo);
      if (cfg.transformer_standard) {
        out.emplace_back(pre + "ff1_w", &layers[l].ff1_w);
        out.emplace_back(pre + "ff1_b", &layers[l].ff1_b);
        out.emplace_back(pre + "ff2_w", &layers[l].ff2_w);
        out.emplace_back(pre + "ff2_b", &layers[l].ff2_b);
      }
    }
    out.emplace_back("head_obj_w", &head_obj_w);
    out.emplace_back("head_obj_b", &head_obj_b);
    out.emplace_back("head_rep_w", &head_rep_w);
    out.emplace_back("head_rep_b", &head_rep_b);
    out.emplace_back("head_box_w", &head_box_w);
    out.emplace_back("head_box_b", &head_box_b);
    return out;
  }
};

struct AttentionLayerNodes {
  int wq, wk, wv, wo;
  int ff1_w = -1, ff1_b = -1, ff2_w = -1, ff2_b = -1;
};

// One multi-head self-attention layer: per head softmax(X_Q X_K^T) X_V with
// the head slices of W_Q/W_K/W_V, heads concatenated, then output-projected.
inline int attention_forward(ad::Tape& tape, int x,
                             const AttentionLayerNodes& lp,
                             const RepRpnConfig& cfg) {
  const int dh = cfg.head_dim();
  const double att_scale =
      cfg.scale_logits ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;
  const int q = tape.matmul(x, lp.wq);
  const int k = tape.matmul(x, lp.wk);
  const int v = tape.matmul(x, lp.wv);
  std::vector<int> head_outputs;
  for (int h = 0; h < cfg.heads; ++h) {
    const int qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
    const int kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
    const int vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
    int logits = tape.matmul_nt(qh, kh);
    if (att_scale != 1.0) logits = tape.scale(logits, att_scale);
    head_outputs.push_back(tape.matmul(tape.row_softmax(logits), vh));
  }
  const int merged = cfg.heads == 1 ? head_outputs[0] : tape.concat_cols(head_outputs);
  return tape.matmul(merged, lp.wo);
}

struct RepRpnNodes {
  std::vector<int> param_ids;  // aligned with RepRpnParams::named_params()
  int x = -1;
  int encoded = -1;     // (n, d)
  int obj_logits = -1;  // (n, k)
  int repetition = -1;  // (n, k)
  int deltas = -1;      // (n, 4k)
};

// Full forward: stacked attention encoder followed by the three 1x1 heads
// (1x1 convolutions over the spatial layout == per-row linear maps over the
// sequence layout).
inline RepRpnNodes reprpn_forward(ad::Tape& tape, RepRpnParams& params,
                                  const Eigen::MatrixXd& x_in,
                                  bool params_trainable = true,
                                  bool input_trainable = false) {
  const RepRpnConfig& cfg = params.cfg;
  RepRpnNodes out;

  auto registry = params.named_params();
  std::vector<int> ids;
  for (auto& [name, tensor] : registry)
    ids.push_back(params_trainable ? tape.param(*tensor) : tape.constant(*tensor));
  out.param_ids = ids;
  size_t cursor = 0;
  auto next_id = [&]() { return ids[cursor++]; };

  ad::Tensor x_t({{static_cast<int>(x_in.rows()), static_cast<int>(x_in.cols())},
                  Eigen::ArrayXd(Eigen::Map<const Eigen::ArrayXd>(
                      Eigen::MatrixXd(x_in.transpose()).data(), x_in.size()))});
  out.x = input_trainable ? tape.param(std::move(x_t)) : tape.constant(std::move(x_t));

  int h = out.x;
  for (int l = 0; l < cfg.layers; ++l) {
    AttentionLayerNodes lp;
    lp.wq = next_id();
    lp.wk = next_id();
    lp.wv = next_id();
    lp.wo = next_id();
    if (cfg.transformer_standard) {
      lp.ff1_w = next_id();
      lp.ff1_b = next_id();
      lp.ff2_w = next_id();
      lp.ff2_b = next_id();
    }
    const int att = attention_forward(tape, h, lp, cfg);
    if (cfg.transformer_standard) {
      h = tape.row_layernorm(tape.add(h, att));
      const int ff = tape.add_bias_rows(
          tape.matmul(tape.relu(tape.add_bias_rows(tape.matmul(h, lp.ff1_w), lp.ff1_b)),
                      lp.ff2_w),
          lp.ff2_b);
      h = tape.row_layernorm(tape.add(h, ff));
    } else {
      h = cfg.layer_norm ? tape.row_layernorm(att) : att;
    }
  }
  out.encoded = h;

  const int obj_w = next_id(), obj_b = next_id();
  const int rep_w = next_id(), rep_b = next_id();
  const int box_w = next_id(), box_b = next_id();
  out.obj_logits = tape.add_bias_rows(tape.matmul(h, obj_w), obj_b);
  out.repetition = tape.add_bias_rows(tape.matmul(h, rep_w), rep_b);
  out.deltas = tape.add_bias_rows(tape.matmul(h, box_w), box_b);
  return out;
}

// Proposals in anchor order: anchor_index = location_row * k + a. Objectness
// through a sigmoid, repetition clamped to >= 0, boxes decoded from deltas.
inline std::vector<Proposal> extract_proposals(const ad::Tape& tape,
                                               const RepRpnNodes& nodes,
                                               const std::vector<Box>& anchors) {
  const ad::Tensor& obj = tape.value(nodes.obj_logits);
  const ad::Tensor& rep = tape.value(nodes.repetition);
  const ad::Tensor& del = tape.value(nodes.deltas);
  const int n = obj.dim(0), k = obj.dim(1);
  if (anchors.size() != static_cast<size_t>(n) * k)
    throw std::invalid_argument("extract_proposals: anchor count mismatch");
  std::vector<Proposal> out;
  out.reserve(anchors.size());
  for (int row = 0; row < n; ++row)
    for (int a = 0; a < k; ++a) {
      const int idx = row * k + a;
      Proposal p;
      p.anchor_index = idx;
      p.objectness =
          1.0 / (1.0 + std::exp(-obj.data[static_cast<Eigen::Index>(row) * k + a]));
      p.repetition =
          std::max(rep.data[static_cast<Eigen::Index>(row) * k + a], 0.0);
      BoxDelta d{del.data[(static_cast<Eigen::Index>(row) * k + a) * 4 + 0],
                 del.data[(static_cast<Eigen::Index>(row) * k + a) * 4 + 1],
                 del.data[(static_cast<Eigen::Index>(row) * k + a) * 4 + 2],
                 del.data[(static_cast<Eigen::Index>(row) * k + a) * 4 + 3]};
      p.box = decode_box(d, anchors[idx]);
      out.push_back(p);
    }
  return out;
}

// Clip to the image, drop degenerate boxes, NMS on repetition score, keep the
// top_k by repetition (all survivors if fewer).
inline std::vector<Proposal> select_exemplars(std::vector<Proposal> proposals,
                                              int top_k, double nms_thresh,
                                              double img_w, double img_h,
                                              double min_side = 1.0) {
  if (top_k < 1) throw std::invalid_argument("select_exemplars: top_k < 1");
  std::vector<Proposal> valid;
  for (Proposal& p : proposals) {
    p.box = p.box.clipped(img_w, img_h);
    if (p.box.valid() && p.box.width() >= min_side && p.box.height() >= min_side)
      valid.push_back(p);
  }
  // stable order under input permutation before the greedy pass
  std::sort(valid.begin(), valid.end(), [](const Proposal& a, const Proposal& b) {
    if (a.repetition != b.repetition) return a.repetition > b.repetition;
    return a.anchor_index < b.anchor_index;
  });
  std::vector<Proposal> kept = nms(std::move(valid), nms_thresh, NmsKey::kRepetition);
  if (static_cast<int>(kept.size()) > top_k) kept.resize(top_k);
  return kept;
}

inline double smooth_l1(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

inline double smooth_l1_grad(double x) {
  return std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0);
}

// Mean over the sampled anchors of
//   lambda*BCE(y, y*) + lambda*smoothL1(delta - b*)[b* defined]
//   + smoothL1(c - c*)[c* defined].
// BCE is evaluated on logits. Registered as a fused tape node.
inline int reprpn_loss(ad::Tape& tape, const RepRpnNodes& nodes,
                       const AnchorTargets& targets,
                       const std::vector<int>& sampled, double lambda) {
  const ad::Tensor& obj = tape.value(nodes.obj_logits);
  const ad::Tensor& rep = tape.value(nodes.repetition);
  const ad::Tensor& del = tape.value(nodes.deltas);
  const int k = obj.dim(1);

  double total = 0;
  for (int ai : sampled) {
    const int row = ai / k, a = ai % k;
    const double z = obj.data[static_cast<Eigen::Index>(row) * k + a];
    const double y = targets.label[ai] == AnchorLabel::kPositive ? 1.0 : 0.0;
    total += lambda * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
    if (targets.has_delta[ai]) {
      const BoxDelta& t = targets.delta[ai];
      const Eigen::Index base = (static_cast<Eigen::Index>(row) * k + a) * 4;
      total += lambda * (smooth_l1(del.data[base + 0] - t.tx) +
                         smooth_l1(del.data[base + 1] - t.ty) +
                         smooth_l1(del.data[base + 2] - t.tw) +
                         smooth_l1(del.data[base + 3] - t.th));
    }
    if (targets.has_repetition[ai]) {
      total += smooth_l1(rep.data[static_cast<Eigen::Index>(row) * k + a] -
                         targets.repetition[ai]);
    }
  }
  const double denom = sampled.empty() ? 1.0 : static_cast<double>(sampled.size());
  ad::Tensor out({1}, Eigen::ArrayXd::Constant(1, total / denom));

  const int obj_id = nodes.obj_logits, rep_id = nodes.repetition, del_id = nodes.deltas;
  const bool rg = tape.needs(obj_id) || tape.needs(rep_id) || tape.needs(del_id);
  return tape.push(
      std::move(out), rg,
      [&tape, obj_id, rep_id, del_id, targets, sampled, lambda, k, denom](int self) {
        const double g0 = tape.grad(self)[0] / denom;
        const ad::Tensor& obj2 = tape.value(obj_id);
        const ad::Tensor& rep2 = tape.value(rep_id);
        const ad::Tensor& del2 = tape.value(del_id);
        Eigen::ArrayXd gobj = Eigen::ArrayXd::Zero(obj2.size());
        Eigen::ArrayXd grep = Eigen::ArrayXd::Zero(rep2.size());
        Eigen::ArrayXd gdel = Eigen::ArrayXd::Zero(del2.size());
        for (int ai : sampled) {
          const int row = ai / k, a = ai % k;
          const Eigen::Index oi = static_cast<Eigen::Index>(row) * k + a;
          const double z = obj2.data[oi];
          const double y = targets.label[ai] == AnchorLabel::kPositive ? 1.0 : 0.0;
          gobj[oi] += g0 * lambda * (1.0 / (1.0 + std::exp(-z)) - y);
          if (targets.has_delta[ai]) {
            const BoxDelta& t = targets.delta[ai];
            const Eigen::Index base = oi * 4;
            gdel[base + 0] += g0 * lambda * smooth_l1_grad(del2.data[base + 0] - t.tx);
            gdel[base + 1] += g0 * lambda * smooth_l1_grad(del2.data[base + 1] - t.ty);
            gdel[base + 2] += g0 * lambda * smooth_l1_grad(del2.data[base + 2] - t.tw);
            gdel[base + 3] += g0 * lambda * smooth_l1_grad(del2.data[base + 3] - t.th);
          }
          if (targets.has_repetition[ai])
            grep[oi] += g0 * smooth_l1_grad(rep2.data[oi] - targets.repetition[ai]);
        }
        tape.accum(obj_id, gobj);
        tape.accum(rep_id, grep);
        tape.accum(del_id, gdel);
      });
}

}  // namespace repcount
