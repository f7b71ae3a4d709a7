#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

namespace repcount {

// Axis-aligned box, corner convention (x1,y1) top-left, (x2,y2) bottom-right,
// continuous pixel coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x2 > x1 && y2 > y1;
  }

  Box clipped(double w, double h) const {
    return {std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h),
            std::clamp(x2, 0.0, w), std::clamp(y2, 0.0, h)};
  }
};

// Faster-R-CNN style center/size regression targets.
struct BoxDelta {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

struct AnchorConfig {
  std::vector<double> sizes = {32, 64, 128, 256};
  std::vector<double> aspect_ratios = {0.5, 1.0, 2.0};  // h/w
  double stride = 16;

  int anchors_per_location() const {
    return static_cast<int>(sizes.size() * aspect_ratios.size());
  }
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  if (iw <= 0) return 0.0;
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline BoxDelta encode_box(const Box& box, const Box& anchor) {
  BoxDelta d;
  d.tx = (box.cx() - anchor.cx()) / anchor.width();
  d.ty = (box.cy() - anchor.cy()) / anchor.height();
  d.tw = std::log(box.width() / anchor.width());
  d.th = std::log(box.height() / anchor.height());
  return d;
}

inline Box decode_box(const BoxDelta& d, const Box& anchor) {
  const double cx = anchor.cx() + d.tx * anchor.width();
  const double cy = anchor.cy() + d.ty * anchor.height();
  const double w = anchor.width() * std::exp(d.tw);
  const double h = anchor.height() * std::exp(d.th);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Anchors in row-major location order; at each location the inner order is
// (size, ratio) with ratio fastest. Each anchor has area size^2 and h/w = ratio.
inline std::vector<Box> generate_anchors(const AnchorConfig& cfg, int feat_h,
                                         int feat_w) {
  if (feat_h < 1 || feat_w < 1)
    throw std::invalid_argument("generate_anchors: empty feature map");
  std::vector<Box> anchors;
  anchors.reserve(static_cast<size_t>(feat_h) * feat_w *
                  cfg.anchors_per_location());
  for (int i = 0; i < feat_h; ++i) {
    for (int j = 0; j < feat_w; ++j) {
      const double cx = cfg.stride * (j + 0.5);
      const double cy = cfg.stride * (i + 0.5);
      for (double size : cfg.sizes) {
        for (double ratio : cfg.aspect_ratios) {
          const double w = size / std::sqrt(ratio);
          const double h = size * std::sqrt(ratio);
          anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  return anchors;
}

enum class AnchorLabel : uint8_t { kNegative = 0, kPositive = 1, kIgnore = 2 };
enum class LabelProvenance : uint8_t { kGroundTruth = 0, kTeacher = 1, kIgnore = 2 };

struct AnchorTargets {
  std::vector<AnchorLabel> label;
  std::vector<BoxDelta> delta;           // meaningful only where has_delta
  std::vector<uint8_t> has_delta;        // positive with a matched GT box
  std::vector<double> repetition;        // meaningful only where has_repetition
  std::vector<uint8_t> has_repetition;   // c* defined
  std::vector<LabelProvenance> provenance;

  size_t size() const { return label.size(); }
};

// Teacher contract: (anchor, image context held by the callable) -> (y*, c*).
// Must be deterministic for a fixed image.
class LabelTeacher {
 public:
  virtual ~LabelTeacher() = default;
  virtual std::pair<int, double> label(const Box& anchor) const = 0;
};

struct GtInstance {
  Box box;
  double class_count = 1;  // instances of this box's class in the image
};

// Faster-R-CNN assignment: positive above 0.7 IoU or argmax per GT box,
// negative below 0.3, ignore in between. Anchors with zero IoU against every
// annotated box fall through to the teacher when one is given.
inline AnchorTargets assign_anchor_targets(
    const std::vector<Box>& anchors, const std::vector<GtInstance>& gt,
    const LabelTeacher* teacher = nullptr, double pos_thresh = 0.7,
    double neg_thresh = 0.3) {
  const size_t n = anchors.size();
  AnchorTargets t;
  t.label.assign(n, AnchorLabel::kNegative);
  t.delta.assign(n, BoxDelta{});
  t.has_delta.assign(n, 0);
  t.repetition.assign(n, 0.0);
  t.has_repetition.assign(n, 0);
  t.provenance.assign(n, LabelProvenance::kGroundTruth);

  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  for (size_t i = 0; i < n; ++i) {
    for (size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[i], gt[g].box);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        best_gt[i] = static_cast<int>(g);
      }
    }
  }

  for (size_t i = 0; i < n; ++i) {
    if (best_gt[i] >= 0 && best_iou[i] > pos_thresh)
      t.label[i] = AnchorLabel::kPositive;
    else if (best_iou[i] >= neg_thresh)
      t.label[i] = AnchorLabel::kIgnore;
  }

  // Every GT box claims its argmax-IoU anchor even below the threshold.
  for (size_t g = 0; g < gt.size(); ++g) {
    double best = 0.0;
    int arg = -1;
    for (size_t i = 0; i < n; ++i) {
      const double v = iou(anchors[i], gt[g].box);
      if (v > best) {
        best = v;
        arg = static_cast<int>(i);
      }
    }
    if (arg >= 0) {
      t.label[arg] = AnchorLabel::kPositive;
      if (best > best_iou[arg] || best_gt[arg] < 0) {
        best_iou[arg] = best;
        best_gt[arg] = static_cast<int>(g);
      }
    }
  }

  for (size_t i = 0; i < n; ++i) {
    if (t.label[i] == AnchorLabel::kPositive && best_gt[i] >= 0) {
      const GtInstance& m = gt[best_gt[i]];
      t.delta[i] = encode_box(m.box, anchors[i]);
      t.has_delta[i] = 1;
      t.repetition[i] = m.class_count;
      t.has_repetition[i] = 1;
    } else if (t.label[i] == AnchorLabel::kIgnore) {
      t.provenance[i] = LabelProvenance::kIgnore;
    } else if (best_iou[i] == 0.0 && teacher != nullptr) {
      auto [y, c] = teacher->label(anchors[i]);
      t.label[i] = y ? AnchorLabel::kPositive : AnchorLabel::kNegative;
      t.repetition[i] = c;
      t.has_repetition[i] = 1;
      t.provenance[i] = LabelProvenance::kTeacher;
    }
    // Negative anchors that partially overlap annotated boxes keep
    // ground-truth provenance with the repetition loss masked.
  }
  return t;
}

struct Proposal {
  Box box;
  double objectness = 0;   // sigmoid output
  double repetition = 0;   // clamped >= 0 at inference
  int anchor_index = -1;
};

enum class NmsKey { kObjectness, kRepetition };

inline std::vector<Proposal> nms(std::vector<Proposal> proposals,
                                 double iou_thresh,
                                 NmsKey key = NmsKey::kObjectness) {
  if (iou_thresh <= 0 || iou_thresh >= 1)
    throw std::invalid_argument("nms: iou_thresh must be in (0,1)");
  auto score = [key](const Proposal& p) {
    return key == NmsKey::kObjectness ? p.objectness : p.repetition;
  };
  std::stable_sort(proposals.begin(), proposals.end(),
                   [&](const Proposal& a, const Proposal& b) {
                     return score(a) > score(b);
                   });
  std::vector<Proposal> kept;
  for (const Proposal& p : proposals) {
    bool suppressed = false;
    for (const Proposal& k : kept) {
      if (iou(p.box, k.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

// Up to batch/2 positives, padded with negatives; uniform without replacement
// within each class. Ignored anchors never sampled.
inline std::vector<int> sample_anchor_batch(const AnchorTargets& targets,
                                            int batch, std::mt19937_64& rng) {
  if (batch < 2) throw std::invalid_argument("sample_anchor_batch: batch < 2");
  std::vector<int> pos, neg;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets.label[i] == AnchorLabel::kPositive)
      pos.push_back(static_cast<int>(i));
    else if (targets.label[i] == AnchorLabel::kNegative)
      neg.push_back(static_cast<int>(i));
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const int n_pos = std::min<int>(batch / 2, static_cast<int>(pos.size()));
  const int n_neg = std::min<int>(batch - n_pos, static_cast<int>(neg.size()));
  std::vector<int> out(pos.begin(), pos.begin() + n_pos);
  out.insert(out.end(), neg.begin(), neg.begin() + n_neg);
  return out;
}

}  // namespace repcount
