#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcount/dataio.hpp"
#include "repcount/dpn.hpp"
#include "repcount/geometry.hpp"
#include "repcount/reprpn.hpp"
#include "repcount/train.hpp"

namespace repcount {

struct ProposalCount {
  Box box;
  double count = 0;
};

// Top-k protocol: keep the proposals among the top k whose max IoU against
// any GT box is at least 0.3 and average their counts; if none qualify,
// average all k counts.
inline double topk_count_estimate(const std::vector<ProposalCount>& top_k,
                                  const std::vector<Box>& gt_boxes,
                                  double iou_gate = 0.3) {
  if (top_k.empty())
    throw std::invalid_argument("topk_count_estimate: no proposals");
  double kept_sum = 0;
  int kept = 0;
  double all_sum = 0;
  for (const ProposalCount& p : top_k) {
    all_sum += p.count;
    double best = 0;
    for (const Box& g : gt_boxes) best = std::max(best, iou(p.box, g));
    if (best >= iou_gate) {
      kept_sum += p.count;
      ++kept;
    }
  }
  if (kept > 0) return kept_sum / kept;
  return all_sum / static_cast<double>(top_k.size());
}

inline std::pair<double, double> mae_rmse(
    const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("mae_rmse: empty input");
  double abs_sum = 0, sq_sum = 0;
  for (const auto& [y, y_hat] : pairs) {
    abs_sum += std::abs(y - y_hat);
    sq_sum += (y - y_hat) * (y - y_hat);
  }
  const double n = static_cast<double>(pairs.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

// Repetition scores stand in for the per-proposal counts (no DPN pass).
inline double fast_count(const std::vector<Proposal>& top_k,
                         const std::vector<Box>& gt_boxes) {
  std::vector<ProposalCount> pc;
  pc.reserve(top_k.size());
  for (const Proposal& p : top_k) pc.push_back({p.box, p.repetition});
  return topk_count_estimate(pc, gt_boxes);
}

// ---- full-pipeline evaluation --------------------------------------------

struct EvalOptions {
  std::vector<int> ks = {1, 3, 5};
  bool use_dpn = true;  // false = repetition-score fast counter
};

struct EvalReport {
  nlohmann::json json;
};

inline EvalReport run_eval(const std::vector<AnnotatedImage>& dataset,
                           const FeatureExtractor& backbone, RepRpnParams& rpn,
                           DpnParams* dpn, const TrainConfig& cfg,
                           const EvalOptions& opts) {
  int max_k = 1;
  for (int k : opts.ks) max_k = std::max(max_k, k);

  struct PerImage {
    std::string name;
    double gt = 0;
    std::vector<ProposalCount> proposals;  // ordered by repetition score
    std::vector<Box> gt_boxes;
    int teacher_anchors = 0;
  };
  std::vector<PerImage> images;

  for (const AnnotatedImage& img : dataset) {
    PreparedImage p = prepare_image(img, backbone, cfg, true);
    PerImage rec;
    rec.name = img.name;
    rec.gt = static_cast<double>(img.dots.size());
    rec.gt_boxes = p.gt_boxes;
    for (size_t i = 0; i < p.targets.size(); ++i)
      if (p.targets.provenance[i] == LabelProvenance::kTeacher)
        ++rec.teacher_anchors;

    ad::Tape tape;
    RepRpnNodes nodes = reprpn_forward(tape, rpn, p.x, false);
    std::vector<Proposal> proposals = extract_proposals(tape, nodes, p.anchors);
    std::vector<Proposal> selected =
        select_exemplars(std::move(proposals), max_k, cfg.nms_thresh,
                         img.image.w, img.image.h);
    FeatureMap imap;
    if (opts.use_dpn && dpn != nullptr) imap = dpn_image_map(p, rpn, cfg);
    for (const Proposal& e : selected) {
      double c = e.repetition;
      if (opts.use_dpn && dpn != nullptr) {
        ad::Tape dtape;
        c = count(predict_density(dtape, *dpn, imap, e.box, img.image.h,
                                  img.image.w));
      }
      rec.proposals.push_back({e.box, c});
    }
    images.push_back(std::move(rec));
  }

  EvalReport report;
  report.json["mode"] = opts.use_dpn ? "dpn" : "fast";
  report.json["teacher"] = cfg.teacher;
  long total_teacher_anchors = 0;
  for (const PerImage& im : images) total_teacher_anchors += im.teacher_anchors;
  report.json["teacher_anchor_total"] = total_teacher_anchors;

  nlohmann::json metrics = nlohmann::json::object();
  for (int k : opts.ks) {
    std::vector<std::pair<double, double>> pairs;
    for (const PerImage& im : images) {
      if (im.proposals.empty()) continue;
      std::vector<ProposalCount> top(
          im.proposals.begin(),
          im.proposals.begin() + std::min<size_t>(k, im.proposals.size()));
      pairs.emplace_back(im.gt, topk_count_estimate(top, im.gt_boxes));
    }
    if (pairs.empty()) continue;
    const auto [mae, rmse] = mae_rmse(pairs);
    metrics["top" + std::to_string(k)] = {{"mae", mae}, {"rmse", rmse}};
  }
  report.json["metrics"] = std::move(metrics);

  nlohmann::json per_image = nlohmann::json::array();
  for (const PerImage& im : images) {
    nlohmann::json rec;
    rec["name"] = im.name;
    rec["gt_count"] = im.gt;
    rec["teacher_anchors"] = im.teacher_anchors;
    nlohmann::json props = nlohmann::json::array();
    for (const ProposalCount& p : im.proposals)
      props.push_back({{"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}},
                       {"count", p.count}});
    rec["proposals"] = std::move(props);
    per_image.push_back(std::move(rec));
  }
  report.json["images"] = std::move(per_image);
  return report;
}

}  // namespace repcount
