#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "repcount/dataio.hpp"
#include "repcount/dpn.hpp"
#include "repcount/features.hpp"
#include "repcount/geometry.hpp"
#include "repcount/reprpn.hpp"
#include "repcount/teachers.hpp"

namespace repcount {

struct TrainConfig {
  double lr = 1e-5;
  int epochs_rpn = 50;
  int epochs_dpn = 50;
  uint64_t seed = 1;
  double lambda = 1.0;
  int anchor_batch = 96;
  int top_k = 3;                 // exemplars fed to the DPN
  std::string teacher = "oracle";  // "oracle" or "none"
  // Image-side features the DPN correlates against: the backbone map, or the
  // frozen encoder output U' on the same grid ("attention").
  std::string dpn_image_features = "backbone";
  double sigma = 2.0;
  double nms_thresh = 0.7;
  double adam_b1 = 0.9, adam_b2 = 0.999, adam_eps = 1e-8;
  int backbone_channels = 64;
  uint64_t backbone_seed = 0x7ba5eULL;
  RepRpnConfig rpn;
  AnchorConfig anchors;
  DpnConfig dpn;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"lr", c.lr},
      {"epochs_rpn", c.epochs_rpn},
      {"epochs_dpn", c.epochs_dpn},
      {"seed", c.seed},
      {"lambda", c.lambda},
      {"anchor_batch", c.anchor_batch},
      {"top_k", c.top_k},
      {"teacher", c.teacher},
      {"dpn_image_features", c.dpn_image_features},
      {"sigma", c.sigma},
      {"nms_thresh", c.nms_thresh},
      {"adam_b1", c.adam_b1},
      {"adam_b2", c.adam_b2},
      {"adam_eps", c.adam_eps},
      {"backbone_channels", c.backbone_channels},
      {"backbone_seed", c.backbone_seed},
      {"rpn",
       {{"d", c.rpn.d},
        {"layers", c.rpn.layers},
        {"heads", c.rpn.heads},
        {"scale_logits", c.rpn.scale_logits},
        {"layer_norm", c.rpn.layer_norm},
        {"transformer_standard", c.rpn.transformer_standard},
        {"init_std", c.rpn.init_std}}},
      {"anchors",
       {{"sizes", c.anchors.sizes},
        {"aspect_ratios", c.anchors.aspect_ratios},
        {"stride", c.anchors.stride}}},
      {"dpn",
       {{"channels", c.dpn.channels},
        {"roi_size", c.dpn.roi_size},
        {"init_std", c.dpn.init_std}}}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&j](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  get("lr", c.lr);
  get("epochs_rpn", c.epochs_rpn);
  get("epochs_dpn", c.epochs_dpn);
  get("seed", c.seed);
  get("lambda", c.lambda);
  get("anchor_batch", c.anchor_batch);
  get("top_k", c.top_k);
  get("teacher", c.teacher);
  get("dpn_image_features", c.dpn_image_features);
  get("sigma", c.sigma);
  get("nms_thresh", c.nms_thresh);
  get("adam_b1", c.adam_b1);
  get("adam_b2", c.adam_b2);
  get("adam_eps", c.adam_eps);
  get("backbone_channels", c.backbone_channels);
  get("backbone_seed", c.backbone_seed);
  if (j.contains("rpn")) {
    const auto& r = j.at("rpn");
    auto getr = [&r](const char* key, auto& dst) {
      if (r.contains(key)) r.at(key).get_to(dst);
    };
    getr("d", c.rpn.d);
    getr("layers", c.rpn.layers);
    getr("heads", c.rpn.heads);
    getr("scale_logits", c.rpn.scale_logits);
    getr("layer_norm", c.rpn.layer_norm);
    getr("transformer_standard", c.rpn.transformer_standard);
    getr("init_std", c.rpn.init_std);
  }
  if (j.contains("anchors")) {
    const auto& a = j.at("anchors");
    if (a.contains("sizes")) a.at("sizes").get_to(c.anchors.sizes);
    if (a.contains("aspect_ratios")) a.at("aspect_ratios").get_to(c.anchors.aspect_ratios);
    if (a.contains("stride")) a.at("stride").get_to(c.anchors.stride);
  }
  if (j.contains("dpn")) {
    const auto& d = j.at("dpn");
    if (d.contains("channels")) d.at("channels").get_to(c.dpn.channels);
    if (d.contains("roi_size")) d.at("roi_size").get_to(c.dpn.roi_size);
    if (d.contains("init_std")) d.at("init_std").get_to(c.dpn.init_std);
  }
  c.rpn.anchors_per_location = c.anchors.anchors_per_location();
}

// ---- optimizer ------------------------------------------------------------

class Adam {
 public:
  Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

  void step(std::vector<std::pair<std::string, ad::Tensor*>>& params,
            const std::vector<const Eigen::ArrayXd*>& grads) {
    if (m_.empty()) {
      for (auto& [name, t] : params) {
        m_.push_back(Eigen::ArrayXd::Zero(t->size()));
        v_.push_back(Eigen::ArrayXd::Zero(t->size()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      const Eigen::ArrayXd& g = *grads[i];
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g.square();
      params[i].second->data -=
          lr_ * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;
};

// ---- checkpoints ----------------------------------------------------------

struct Checkpoint {
  nlohmann::json meta;  // config echo, stage tag, loss log
  std::vector<std::pair<std::string, ad::Tensor>> arrays;
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  const std::string meta = ckpt.meta.dump();
  const char magic[4] = {'R', 'P', 'C', 'C'};
  const uint32_t version = 1;
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  const uint64_t meta_len = meta.size();
  out.write(reinterpret_cast<const char*>(&meta_len), 8);
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  const uint32_t n_arrays = static_cast<uint32_t>(ckpt.arrays.size());
  out.write(reinterpret_cast<const char*>(&n_arrays), 4);
  for (const auto& [name, t] : ckpt.arrays) {
    const uint32_t name_len = static_cast<uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&name_len), 4);
    out.write(name.data(), name_len);
    const uint32_t ndims = static_cast<uint32_t>(t.shape.size());
    out.write(reinterpret_cast<const char*>(&ndims), 4);
    for (int d : t.shape) {
      const uint32_t dim = static_cast<uint32_t>(d);
      out.write(reinterpret_cast<const char*>(&dim), 4);
    }
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot read " + path);
  char magic[4];
  uint32_t version = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in || std::string(magic, 4) != "RPCC" || version != 1)
    throw std::runtime_error("load_checkpoint: bad magic or version in " + path);
  uint64_t meta_len = 0;
  in.read(reinterpret_cast<char*>(&meta_len), 8);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  Checkpoint ckpt;
  ckpt.meta = nlohmann::json::parse(meta);
  uint32_t n_arrays = 0;
  in.read(reinterpret_cast<char*>(&n_arrays), 4);
  for (uint32_t i = 0; i < n_arrays; ++i) {
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), 4);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    uint32_t ndims = 0;
    in.read(reinterpret_cast<char*>(&ndims), 4);
    std::vector<int> shape(ndims);
    for (uint32_t d = 0; d < ndims; ++d) {
      uint32_t dim = 0;
      in.read(reinterpret_cast<char*>(&dim), 4);
      shape[d] = static_cast<int>(dim);
    }
    ad::Tensor t = ad::Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated " + path);
    ckpt.arrays.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

template <typename Params>
inline void restore_params(Params& params, const Checkpoint& ckpt) {
  auto registry = params.named_params();
  for (auto& [name, tensor] : registry) {
    bool found = false;
    for (const auto& [cname, ct] : ckpt.arrays)
      if (cname == name) {
        if (ct.shape != tensor->shape)
          throw std::runtime_error("restore_params: shape mismatch for " + name);
        *tensor = ct;
        found = true;
        break;
      }
    if (!found) throw std::runtime_error("restore_params: missing array " + name);
  }
}

// ---- per-image preparation ------------------------------------------------

struct PreparedImage {
  const AnnotatedImage* img = nullptr;
  FeatureMap fm;
  Eigen::MatrixXd x;  // encoder input sequence (n, d)
  std::vector<Box> anchors;
  std::vector<Box> gt_boxes;  // expanded dot boxes, annotated class
  AnchorTargets targets;
};

inline PreparedImage prepare_image(const AnnotatedImage& img,
                                   const FeatureExtractor& backbone,
                                   const TrainConfig& cfg, bool with_targets) {
  PreparedImage p;
  p.img = &img;
  p.fm = backbone.extract(img.image);
  const Eigen::MatrixXd pos =
      positional_embeddings(p.fm.hf(), p.fm.wf(), cfg.rpn.d);
  p.x = to_sequence(p.fm, pos);
  AnchorConfig acfg = cfg.anchors;
  acfg.stride = p.fm.stride;
  p.anchors = generate_anchors(acfg, p.fm.hf(), p.fm.wf());
  p.gt_boxes = expand_dots_to_boxes(img.dots, img.exemplar_boxes, img.image.w,
                                    img.image.h);
  if (with_targets) {
    std::vector<GtInstance> gt;
    for (const Box& b : p.gt_boxes)
      gt.push_back({b, static_cast<double>(img.dots.size())});
    std::unique_ptr<OracleLabelTeacher> teacher;
    if (cfg.teacher == "oracle" && img.has_hidden_gt())
      teacher = std::make_unique<OracleLabelTeacher>(img);
    p.targets = assign_anchor_targets(p.anchors, gt, teacher.get());
  }
  return p;
}

// Image-side feature map the DPN pools from and correlates against: the
// backbone map by default, or the frozen encoder output U' on the same grid.
inline FeatureMap dpn_image_map(const Eigen::MatrixXd& x, const FeatureMap& fm,
                                RepRpnParams& rpn, const TrainConfig& cfg) {
  if (cfg.dpn_image_features == "backbone") return fm;
  if (cfg.dpn_image_features != "attention")
    throw std::invalid_argument(
        "dpn_image_features must be 'backbone' or 'attention'");
  ad::Tape tape;
  RepRpnNodes nodes = reprpn_forward(tape, rpn, x, false);
  const ad::Tensor& enc = tape.value(nodes.encoded);
  const int n = enc.dim(0), d = enc.dim(1);
  Eigen::MatrixXd u(n, d);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c)
      u(r, c) = enc.data[static_cast<Eigen::Index>(r) * d + c];
  FeatureMap out;
  out.values = from_sequence(u, fm.hf(), fm.wf());
  out.stride = fm.stride;
  return out;
}

inline FeatureMap dpn_image_map(const PreparedImage& p, RepRpnParams& rpn,
                                const TrainConfig& cfg) {
  return dpn_image_map(p.x, p.fm, rpn, cfg);
}

// ---- stage 1: RepRPN ------------------------------------------------------

struct TrainLogEntry {
  int epoch;
  double loss;
};

struct RpnTrainResult {
  RepRpnParams params;
  std::vector<TrainLogEntry> log;
};

inline RpnTrainResult train_reprpn(const std::vector<AnnotatedImage>& dataset,
                                   const FeatureExtractor& backbone,
                                   TrainConfig cfg,
                                   std::ostream* progress = nullptr) {
  if (dataset.empty()) throw std::invalid_argument("train_reprpn: empty dataset");
  cfg.rpn.anchors_per_location = cfg.anchors.anchors_per_location();
  std::mt19937_64 init_rng(cfg.seed);
  RpnTrainResult result{RepRpnParams::init(cfg.rpn, init_rng), {}};
  RepRpnParams& params = result.params;

  std::vector<PreparedImage> prepared;
  prepared.reserve(dataset.size());
  for (const AnnotatedImage& img : dataset)
    prepared.push_back(prepare_image(img, backbone, cfg, true));

  Adam adam(cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps);
  std::mt19937_64 sample_rng(cfg.seed + 0x9e3779b97f4a7c15ULL);
  auto registry = params.named_params();

  for (int epoch = 0; epoch < cfg.epochs_rpn; ++epoch) {
    double epoch_loss = 0;
    for (const PreparedImage& p : prepared) {
      ad::Tape tape;
      RepRpnNodes nodes = reprpn_forward(tape, params, p.x, true);
      const std::vector<int> batch =
          sample_anchor_batch(p.targets, cfg.anchor_batch, sample_rng);
      const int loss = reprpn_loss(tape, nodes, p.targets, batch, cfg.lambda);
      const double loss_val = tape.value(loss).data[0];
      if (!std::isfinite(loss_val))
        throw std::runtime_error("train_reprpn: non-finite loss at epoch " +
                                 std::to_string(epoch));
      epoch_loss += loss_val;
      tape.backward(loss);
      std::vector<const Eigen::ArrayXd*> grads;
      for (int id : nodes.param_ids) grads.push_back(&tape.grad(id));
      adam.step(registry, grads);
    }
    epoch_loss /= static_cast<double>(prepared.size());
    result.log.push_back({epoch, epoch_loss});
    if (progress)
      *progress << "{\"epoch\": " << epoch << ", \"loss\": " << epoch_loss
                << "}\n";
  }
  return result;
}

inline Checkpoint rpn_checkpoint(RpnTrainResult& result, const TrainConfig& cfg) {
  Checkpoint ckpt;
  ckpt.meta["stage"] = "rpn";
  ckpt.meta["config"] = cfg;
  nlohmann::json log = nlohmann::json::array();
  for (const TrainLogEntry& e : result.log)
    log.push_back({{"epoch", e.epoch}, {"loss", e.loss}});
  ckpt.meta["loss_log"] = std::move(log);
  for (auto& [name, t] : result.params.named_params())
    ckpt.arrays.emplace_back(name, *t);
  return ckpt;
}

// ---- stage 2: DPN ---------------------------------------------------------

struct ExemplarSample {
  int image_index;
  Box box;
  DensityMap target;
};

// Frozen-RPN exemplar selection plus Z* construction for one image. An
// exemplar intersecting (IoU > 0) any expanded annotation box gets the
// Gaussian dot map of the annotated class; otherwise the density teacher, or
// no sample at all when teacher == none.
inline std::vector<ExemplarSample> stage2_samples(
    const PreparedImage& p, int image_index, RepRpnParams& rpn,
    const TrainConfig& cfg) {
  ad::Tape tape;
  RepRpnNodes nodes = reprpn_forward(tape, rpn, p.x, false);
  std::vector<Proposal> proposals = extract_proposals(tape, nodes, p.anchors);
  std::vector<Proposal> exemplars =
      select_exemplars(std::move(proposals), cfg.top_k, cfg.nms_thresh,
                       p.img->image.w, p.img->image.h);
  std::vector<ExemplarSample> out;
  std::unique_ptr<OracleDensityTeacher> teacher;
  if (cfg.teacher == "oracle" && p.img->has_hidden_gt())
    teacher = std::make_unique<OracleDensityTeacher>(*p.img, cfg.sigma);
  for (const Proposal& e : exemplars) {
    bool intersects = false;
    for (const Box& g : p.gt_boxes)
      if (iou(e.box, g) > 0) {
        intersects = true;
        break;
      }
    if (intersects) {
      out.push_back({image_index, e.box,
                     render_density(p.img->dots, p.img->image.h, p.img->image.w,
                                    cfg.sigma)});
    } else if (teacher) {
      out.push_back({image_index, e.box, teacher->density(e.box)});
    }
  }
  return out;
}

struct DpnTrainResult {
  DpnParams params;
  std::vector<TrainLogEntry> log;
  int skipped_images = 0;
};

inline DpnTrainResult train_dpn(const std::vector<AnnotatedImage>& dataset,
                                const FeatureExtractor& backbone,
                                RepRpnParams& rpn, TrainConfig cfg,
                                std::ostream* progress = nullptr) {
  if (dataset.empty()) throw std::invalid_argument("train_dpn: empty dataset");
  std::mt19937_64 init_rng(cfg.seed + 0x51ed2700dULL);
  DpnTrainResult result{DpnParams::init(cfg.dpn, init_rng), {}, 0};
  DpnParams& params = result.params;

  // The RepRPN is frozen: exemplars, targets and image maps are computed once.
  std::vector<PreparedImage> prepared;
  std::vector<FeatureMap> image_maps;
  std::vector<std::vector<ExemplarSample>> samples;
  for (size_t i = 0; i < dataset.size(); ++i) {
    prepared.push_back(prepare_image(dataset[i], backbone, cfg, false));
    image_maps.push_back(dpn_image_map(prepared.back(), rpn, cfg));
    auto s = stage2_samples(prepared.back(), static_cast<int>(i), rpn, cfg);
    if (s.empty()) {
      ++result.skipped_images;
      if (progress)
        *progress << "{\"warning\": \"no exemplars for image " << dataset[i].name
                  << "; skipped\"}\n";
    }
    samples.push_back(std::move(s));
  }

  Adam adam(cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps);
  auto registry = params.named_params();

  for (int epoch = 0; epoch < cfg.epochs_dpn; ++epoch) {
    double epoch_loss = 0;
    int n_images = 0;
    for (size_t i = 0; i < prepared.size(); ++i) {
      if (samples[i].empty()) continue;
      const PreparedImage& p = prepared[i];
      const FeatureMap& imap = image_maps[i];
      ad::Tape tape;
      const int fm_node = tape.constant(imap.values);
      const std::vector<int> param_ids = register_dpn_params(tape, params, true);
      int total = -1;
      for (const ExemplarSample& s : samples[i]) {
        const int pooled =
            roi_pool_box(tape, fm_node, imap, s.box, cfg.dpn.roi_size);
        const int corr = tape.correlate(fm_node, pooled);
        DpnNodes nodes = dpn_forward_with(tape, param_ids, corr,
                                          p.img->image.h, p.img->image.w);
        const int loss = mse_loss(tape, nodes.density, s.target);
        total = total < 0 ? loss : tape.add(total, loss);
      }
      total = tape.scale(total, 1.0 / static_cast<double>(samples[i].size()));
      const double loss_val = tape.value(total).data[0];
      if (!std::isfinite(loss_val))
        throw std::runtime_error("train_dpn: non-finite loss at epoch " +
                                 std::to_string(epoch));
      epoch_loss += loss_val;
      ++n_images;
      tape.backward(total);
      std::vector<const Eigen::ArrayXd*> grads;
      for (int id : param_ids) grads.push_back(&tape.grad(id));
      adam.step(registry, grads);
    }
    epoch_loss /= std::max(n_images, 1);
    result.log.push_back({epoch, epoch_loss});
    if (progress)
      *progress << "{\"epoch\": " << epoch << ", \"loss\": " << epoch_loss
                << "}\n";
  }
  return result;
}

inline Checkpoint dpn_checkpoint(DpnTrainResult& result, const TrainConfig& cfg) {
  Checkpoint ckpt;
  ckpt.meta["stage"] = "dpn";
  ckpt.meta["config"] = cfg;
  nlohmann::json log = nlohmann::json::array();
  for (const TrainLogEntry& e : result.log)
    log.push_back({{"epoch", e.epoch}, {"loss", e.loss}});
  ckpt.meta["loss_log"] = std::move(log);
  ckpt.meta["skipped_images"] = result.skipped_images;
  for (auto& [name, t] : result.params.named_params())
    ckpt.arrays.emplace_back(name, *t);
  return ckpt;
}

}  // namespace repcount
