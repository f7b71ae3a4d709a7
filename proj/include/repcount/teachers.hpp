#pragma once

#include <memory>
#include <utility>

#include "repcount/dataio.hpp"
#include "repcount/densitymap.hpp"
#include "repcount/geometry.hpp"

namespace repcount {

// Density teacher contract: (exemplar box, image context) -> H x W density
// target. Deterministic for a fixed image.
class DensityTeacher {
 public:
  virtual ~DensityTeacher() = default;
  virtual DensityMap density(const Box& exemplar) const = 0;
};

// Stand-in for the detection-pretrained teacher RPN: labels an anchor from
// the synthetic scene's full hidden ground truth. y* = 1 with c* = the class
// count of the best-IoU hidden box when max IoU > 0.5, else (0, 0).
class OracleLabelTeacher : public LabelTeacher {
 public:
  OracleLabelTeacher(const AnnotatedImage& img, double iou_gate = 0.5)
      : img_(&img), iou_gate_(iou_gate) {}

  std::pair<int, double> label(const Box& anchor) const override {
    double best = 0;
    double best_count = 0;
    for (const HiddenClass& hc : img_->hidden_gt)
      for (const Box& b : hc.boxes) {
        const double v = iou(anchor, b);
        if (v > best) {
          best = v;
          best_count = hc.count;
        }
      }
    if (best > iou_gate_) return {1, best_count};
    return {0, 0.0};
  }

 private:
  const AnnotatedImage* img_;
  double iou_gate_;
};

// Stand-in for the pretrained density-teacher counter: renders the hidden dot
// set of the exemplar's best-IoU hidden class (IoU > 0.5), else a zero map.
class OracleDensityTeacher : public DensityTeacher {
 public:
  OracleDensityTeacher(const AnnotatedImage& img, double sigma = 2.0,
                       double iou_gate = 0.5)
      : img_(&img), sigma_(sigma), iou_gate_(iou_gate) {}

  DensityMap density(const Box& exemplar) const override {
    double best = 0;
    const HiddenClass* match = nullptr;
    for (const HiddenClass& hc : img_->hidden_gt)
      for (const Box& b : hc.boxes) {
        const double v = iou(exemplar, b);
        if (v > best) {
          best = v;
          match = &hc;
        }
      }
    if (match != nullptr && best > iou_gate_)
      return render_density(match->dots, img_->image.h, img_->image.w, sigma_);
    DensityMap z;
    z.values = Eigen::MatrixXd::Zero(img_->image.h, img_->image.w);
    return z;
  }

 private:
  const AnnotatedImage* img_;
  double sigma_;
  double iou_gate_;
};

}  // namespace repcount
