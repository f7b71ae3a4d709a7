#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcount/densitymap.hpp"
#include "repcount/geometry.hpp"
#include "repcount/image.hpp"

namespace repcount {

// Full per-class ground truth carried only by synthetic scenes. Real
// FSC-147-style data has no access to this.
struct HiddenClass {
  int class_id = 0;
  int count = 0;
  std::vector<Box> boxes;
  DotMap dots;
};

struct AnnotatedImage {
  std::string name;  // image filename within the dataset
  Image image;
  int annotated_class = 0;
  std::vector<Box> exemplar_boxes;  // exactly 3
  DotMap dots;                      // annotated class only
  std::vector<HiddenClass> hidden_gt;  // empty when unavailable

  bool has_hidden_gt() const { return !hidden_gt.empty(); }
};

enum class ShapeKind { kCircle, kSquare, kTriangle };

struct ClassSpec {
  ShapeKind shape = ShapeKind::kCircle;
  double scale_min = 4, scale_max = 6;  // shape radius in pixels
  int count_min = 5, count_max = 30;
};

struct SceneSpec {
  int width = 64, height = 64;
  std::vector<ClassSpec> classes = {ClassSpec{}};
  int annotated_class = 0;  // exactly one class is annotated
  double max_overlap = 0.05;  // max IoU budget between instance boxes
  double noise = 0.08;
  int placement_retries = 200;
};

// One box per dot, centered on the dot, sized to the mean exemplar
// width/height, clipped to image bounds.
inline std::vector<Box> expand_dots_to_boxes(const DotMap& dots,
                                             const std::vector<Box>& exemplars,
                                             int img_w, int img_h) {
  if (exemplars.empty())
    throw std::invalid_argument("expand_dots_to_boxes: no exemplar boxes");
  double mw = 0, mh = 0;
  for (const Box& e : exemplars) {
    mw += e.width();
    mh += e.height();
  }
  mw /= static_cast<double>(exemplars.size());
  mh /= static_cast<double>(exemplars.size());
  std::vector<Box> out;
  out.reserve(dots.size());
  for (const Dot& d : dots) {
    Box b{d.x - 0.5 * mw, d.y - 0.5 * mh, d.x + 0.5 * mw, d.y + 0.5 * mh};
    out.push_back(b.clipped(img_w, img_h));
  }
  return out;
}

namespace detail {

inline std::array<uint8_t, 3> class_hue(int class_id, std::mt19937_64& rng) {
  static constexpr std::array<std::array<uint8_t, 3>, 3> base = {
      {{210, 60, 50}, {55, 190, 70}, {65, 90, 220}}};
  std::uniform_int_distribution<int> jitter(-20, 20);
  auto c = base[class_id % 3];
  for (auto& ch : c)
    ch = static_cast<uint8_t>(std::clamp(ch + jitter(rng), 0, 255));
  return c;
}

inline void draw_shape(Image& img, ShapeKind kind, double cx, double cy,
                       double radius, std::array<uint8_t, 3> color) {
  const int r0 = std::max(0, static_cast<int>(cy - radius - 1));
  const int r1 = std::min(img.h - 1, static_cast<int>(cy + radius + 1));
  const int c0 = std::max(0, static_cast<int>(cx - radius - 1));
  const int c1 = std::min(img.w - 1, static_cast<int>(cx + radius + 1));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
      bool inside = false;
      switch (kind) {
        case ShapeKind::kCircle:
          inside = dx * dx + dy * dy <= radius * radius;
          break;
        case ShapeKind::kSquare:
          inside = std::abs(dx) <= radius && std::abs(dy) <= radius;
          break;
        case ShapeKind::kTriangle:
          // upward triangle inscribed in the radius box
          inside = dy <= radius && dy >= -radius &&
                   std::abs(dx) <= (dy + radius) / 2.0;
          break;
      }
      if (inside)
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = color[ch];
    }
}

}  // namespace detail

// Deterministic under the rng seed. Dots sit at instance centers; the visible
// annotation covers exactly the annotated class, hidden_gt covers all classes.
inline AnnotatedImage generate_scene(const SceneSpec& spec,
                                     std::mt19937_64& rng) {
  if (spec.classes.empty() || spec.classes.size() > 3)
    throw std::invalid_argument("generate_scene: 1..3 classes required");
  if (spec.annotated_class < 0 ||
      spec.annotated_class >= static_cast<int>(spec.classes.size()))
    throw std::invalid_argument("generate_scene: bad annotated_class");

  AnnotatedImage out;
  out.image = Image(spec.height, spec.width);
  out.annotated_class = spec.annotated_class;

  // Noisy gray background.
  std::uniform_int_distribution<int> bg(0, 255);
  std::normal_distribution<double> noise(0.0, 255.0 * spec.noise);
  for (int r = 0; r < spec.height; ++r)
    for (int c = 0; c < spec.width; ++c) {
      const uint8_t v = static_cast<uint8_t>(
          std::clamp(120.0 + noise(rng), 0.0, 255.0));
      for (int ch = 0; ch < 3; ++ch) out.image.at(r, c, ch) = v;
    }

  std::vector<Box> placed;
  for (int cls = 0; cls < static_cast<int>(spec.classes.size()); ++cls) {
    const ClassSpec& cs = spec.classes[cls];
    if (cs.count_min < 1 || cs.count_max < cs.count_min)
      throw std::invalid_argument("generate_scene: bad count range");
    std::uniform_int_distribution<int> count_dist(cs.count_min, cs.count_max);
    const int n = count_dist(rng);

    HiddenClass hc;
    hc.class_id = cls;
    hc.count = n;
    std::uniform_real_distribution<double> radius_dist(cs.scale_min, cs.scale_max);
    for (int i = 0; i < n; ++i) {
      bool ok = false;
      for (int attempt = 0; attempt < spec.placement_retries && !ok; ++attempt) {
        const double radius = radius_dist(rng);
        std::uniform_real_distribution<double> x_dist(radius, spec.width - radius);
        std::uniform_real_distribution<double> y_dist(radius, spec.height - radius);
        const double cx = x_dist(rng), cy = y_dist(rng);
        Box b{cx - radius, cy - radius, cx + radius, cy + radius};
        bool clash = false;
        for (const Box& p : placed)
          if (iou(b, p) > spec.max_overlap) {
            clash = true;
            break;
          }
        if (clash) continue;
        detail::draw_shape(out.image, cs.shape, cx, cy, radius,
                           detail::class_hue(cls, rng));
        placed.push_back(b);
        hc.boxes.push_back(b);
        hc.dots.push_back({cx, cy});
        ok = true;
      }
      if (!ok)
        throw std::runtime_error(
            "generate_scene: placement failed; lower counts or overlap budget");
    }
    out.hidden_gt.push_back(std::move(hc));
  }

  const HiddenClass& ann = out.hidden_gt[spec.annotated_class];
  out.dots = ann.dots;
  std::uniform_int_distribution<size_t> pick(0, ann.boxes.size() - 1);
  for (int i = 0; i < 3; ++i) out.exemplar_boxes.push_back(ann.boxes[pick(rng)]);
  return out;
}

// --- dataset serialization -------------------------------------------------
//
// <dir>/images/<name>.ppm
// <dir>/annotations.json : { name: {class, points: [[x,y]..],
//                                   box_examples: [[x1,y1,x2,y2] x3]} }
// <dir>/hidden_gt.json   : optional, synthetic only

namespace detail {

inline nlohmann::json box_to_json(const Box& b) {
  return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2});
}

inline Box box_from_json(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 4)
    throw std::runtime_error("dataset: field '" + field + "' is not a 4-box");
  return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
             j[3].get<double>()};
}

}  // namespace detail

inline void save_dataset(const std::vector<AnnotatedImage>& images,
                         const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  nlohmann::json ann = nlohmann::json::object();
  nlohmann::json hidden = nlohmann::json::object();
  bool any_hidden = false;
  for (const AnnotatedImage& im : images) {
    save_ppm(im.image, (fs::path(dir) / "images" / im.name).string());
    nlohmann::json rec;
    rec["class"] = im.annotated_class;
    rec["points"] = nlohmann::json::array();
    for (const Dot& d : im.dots) rec["points"].push_back({d.x, d.y});
    rec["box_examples"] = nlohmann::json::array();
    for (const Box& b : im.exemplar_boxes)
      rec["box_examples"].push_back(detail::box_to_json(b));
    ann[im.name] = std::move(rec);
    if (im.has_hidden_gt()) {
      any_hidden = true;
      nlohmann::json classes = nlohmann::json::array();
      for (const HiddenClass& hc : im.hidden_gt) {
        nlohmann::json jc;
        jc["class"] = hc.class_id;
        jc["count"] = hc.count;
        jc["boxes"] = nlohmann::json::array();
        for (const Box& b : hc.boxes) jc["boxes"].push_back(detail::box_to_json(b));
        jc["dots"] = nlohmann::json::array();
        for (const Dot& d : hc.dots) jc["dots"].push_back({d.x, d.y});
        classes.push_back(std::move(jc));
      }
      hidden[im.name] = std::move(classes);
    }
  }
  std::ofstream(fs::path(dir) / "annotations.json") << ann.dump(1) << "\n";
  if (any_hidden)
    std::ofstream(fs::path(dir) / "hidden_gt.json") << hidden.dump(1) << "\n";
}

inline std::vector<AnnotatedImage> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "annotations.json");
  if (!in)
    throw std::runtime_error("load_dataset: missing " + dir + "/annotations.json");
  nlohmann::json ann = nlohmann::json::parse(in);

  nlohmann::json hidden = nlohmann::json::object();
  if (std::ifstream hin{fs::path(dir) / "hidden_gt.json"})
    hidden = nlohmann::json::parse(hin);

  std::vector<AnnotatedImage> out;
  for (auto it = ann.begin(); it != ann.end(); ++it) {
    const nlohmann::json& rec = it.value();
    AnnotatedImage im;
    im.name = it.key();
    for (const char* field : {"class", "points", "box_examples"})
      if (!rec.contains(field))
        throw std::runtime_error("load_dataset: record '" + im.name +
                                 "' missing field '" + field + "'");
    im.image = load_ppm((fs::path(dir) / "images" / im.name).string());
    im.annotated_class = rec["class"].get<int>();
    for (const auto& p : rec["points"]) {
      if (!p.is_array() || p.size() != 2)
        throw std::runtime_error("load_dataset: record '" + im.name +
                                 "' has a malformed entry in 'points'");
      im.dots.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    for (const auto& b : rec["box_examples"])
      im.exemplar_boxes.push_back(detail::box_from_json(b, "box_examples"));
    if (im.exemplar_boxes.size() != 3)
      throw std::runtime_error("load_dataset: record '" + im.name +
                               "' needs exactly 3 box_examples");
    if (hidden.contains(im.name)) {
      for (const auto& jc : hidden[im.name]) {
        HiddenClass hc;
        hc.class_id = jc.at("class").get<int>();
        hc.count = jc.at("count").get<int>();
        for (const auto& b : jc.at("boxes"))
          hc.boxes.push_back(detail::box_from_json(b, "hidden_gt.boxes"));
        for (const auto& d : jc.at("dots"))
          hc.dots.push_back({d[0].get<double>(), d[1].get<double>()});
        im.hidden_gt.push_back(std::move(hc));
      }
    }
    out.push_back(std::move(im));
  }
  std::sort(out.begin(), out.end(),
            [](const AnnotatedImage& a, const AnnotatedImage& b) {
              return a.name < b.name;
            });
  return out;
}

}  // namespace repcount
