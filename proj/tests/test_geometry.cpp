#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "repcount/geometry.hpp"

using namespace repcount;

namespace {

// Unit-grid rasterization oracle for integer-coordinate boxes.
double iou_raster_oracle(const Box& a, const Box& b) {
  auto inside = [](const Box& box, int x, int y) {
    return x >= box.x1 && x < box.x2 && y >= box.y1 && y < box.y2;
  };
  const int x0 = static_cast<int>(std::min(a.x1, b.x1));
  const int x1 = static_cast<int>(std::max(a.x2, b.x2));
  const int y0 = static_cast<int>(std::min(a.y1, b.y1));
  const int y1 = static_cast<int>(std::max(a.y2, b.y2));
  long inter = 0, uni = 0;
  for (int x = x0; x < x1; ++x)
    for (int y = y0; y < y1; ++y) {
      const bool ia = inside(a, x, y), ib = inside(b, x, y);
      if (ia && ib) ++inter;
      if (ia || ib) ++uni;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

Box random_int_box(std::mt19937_64& rng, int span) {
  std::uniform_int_distribution<int> coord(0, span);
  std::uniform_int_distribution<int> side(1, span / 2);
  const int x1 = coord(rng), y1 = coord(rng);
  return {static_cast<double>(x1), static_cast<double>(y1),
          static_cast<double>(x1 + side(rng)), static_cast<double>(y1 + side(rng))};
}

struct FixedTeacher : LabelTeacher {
  Box target;
  double count;
  FixedTeacher(Box t, double c) : target(t), count(c) {}
  std::pair<int, double> label(const Box& anchor) const override {
    if (iou(anchor, target) > 0.5) return {1, count};
    return {0, 0.0};
  }
};

}  // namespace

TEST_CASE("iou basic cases") {
  const Box a{0, 0, 10, 10};
  CHECK(iou(a, a) == Catch::Approx(1.0));
  CHECK(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
  CHECK(iou({0, 0, 10, 10}, {5, 0, 15, 10}) == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("iou matches rasterization oracle on integer boxes") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 300; ++i) {
    const Box a = random_int_box(rng, 24);
    const Box b = random_int_box(rng, 24);
    CHECK(iou(a, b) == Catch::Approx(iou_raster_oracle(a, b)).margin(1e-6));
    CHECK(iou(a, b) == Catch::Approx(iou(b, a)));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
}

TEST_CASE("encode_box examples") {
  const Box anchor{0, 0, 10, 10};
  SECTION("identity") {
    const BoxDelta d = encode_box(anchor, anchor);
    CHECK(d.tx == Catch::Approx(0.0).margin(1e-12));
    CHECK(d.ty == Catch::Approx(0.0).margin(1e-12));
    CHECK(d.tw == Catch::Approx(0.0).margin(1e-12));
    CHECK(d.th == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("center shift by one anchor width") {
    const BoxDelta d = encode_box({10, 0, 20, 10}, anchor);
    CHECK(d.tx == Catch::Approx(1.0));
    CHECK(d.ty == Catch::Approx(0.0).margin(1e-12));
    CHECK(d.tw == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("double width") {
    const BoxDelta d = encode_box({-5, 0, 15, 10}, anchor);
    CHECK(d.tw == Catch::Approx(std::log(2.0)));
  }
}

TEST_CASE("decode_box examples and round trip") {
  const Box anchor{0, 0, 10, 10};
  SECTION("zero delta reproduces anchor") {
    const Box b = decode_box({0, 0, 0, 0}, anchor);
    CHECK(b.x1 == Catch::Approx(0.0).margin(1e-12));
    CHECK(b.y2 == Catch::Approx(10.0));
  }
  SECTION("tx=1 shifts center to (15,5)") {
    const Box b = decode_box({1, 0, 0, 0}, anchor);
    CHECK(b.cx() == Catch::Approx(15.0));
    CHECK(b.cy() == Catch::Approx(5.0));
  }
  SECTION("round trip on random pairs") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> coord(0, 100), side(1, 60);
    double max_err = 0;
    for (int i = 0; i < 1000; ++i) {
      const Box box{coord(rng), coord(rng), 0, 0};
      const Box b{box.x1, box.y1, box.x1 + side(rng), box.y1 + side(rng)};
      const Box a{coord(rng), coord(rng), 0, 0};
      const Box anc{a.x1, a.y1, a.x1 + side(rng), a.y1 + side(rng)};
      const Box r = decode_box(encode_box(b, anc), anc);
      max_err = std::max({max_err, std::abs(r.x1 - b.x1), std::abs(r.y1 - b.y1),
                          std::abs(r.x2 - b.x2), std::abs(r.y2 - b.y2)});
    }
    CHECK(max_err < 1e-5);
  }
}

TEST_CASE("generate_anchors counts and geometry") {
  SECTION("4 sizes x 3 ratios on 8x8") {
    AnchorConfig cfg;
    CHECK(generate_anchors(cfg, 8, 8).size() == 768);
  }
  SECTION("single anchor placement") {
    AnchorConfig cfg;
    cfg.sizes = {32};
    cfg.aspect_ratios = {1.0};
    cfg.stride = 16;
    const auto anchors = generate_anchors(cfg, 1, 1);
    REQUIRE(anchors.size() == 1);
    CHECK(anchors[0].x1 == Catch::Approx(-8.0));
    CHECK(anchors[0].y1 == Catch::Approx(-8.0));
    CHECK(anchors[0].x2 == Catch::Approx(24.0));
    CHECK(anchors[0].y2 == Catch::Approx(24.0));
  }
  SECTION("aspect ratio shapes") {
    AnchorConfig cfg;
    cfg.sizes = {16};
    cfg.aspect_ratios = {4.0};
    const auto anchors = generate_anchors(cfg, 1, 1);
    CHECK(anchors[0].height() == Catch::Approx(32.0));
    CHECK(anchors[0].width() == Catch::Approx(8.0));
    CHECK(anchors[0].area() == Catch::Approx(16.0 * 16.0));
  }
}

TEST_CASE("assign_anchor_targets protocol") {
  SECTION("identity anchor is positive with GT count") {
    const std::vector<Box> anchors = {{10, 10, 20, 20}};
    const std::vector<GtInstance> gt = {{{10, 10, 20, 20}, 7}};
    const AnchorTargets t = assign_anchor_targets(anchors, gt);
    REQUIRE(t.label[0] == AnchorLabel::kPositive);
    CHECK(t.delta[0].tx == Catch::Approx(0.0).margin(1e-12));
    CHECK(t.repetition[0] == Catch::Approx(7.0));
    CHECK(t.provenance[0] == LabelProvenance::kGroundTruth);
  }
  SECTION("max IoU 0.5 is ignored") {
    // second anchor exists so the half-overlap anchor is not the argmax
    const std::vector<Box> anchors = {{0, 0, 10, 10}, {0, 0, 10, 5}};
    const std::vector<GtInstance> gt = {{{0, 0, 10, 10}, 3}};
    const AnchorTargets t = assign_anchor_targets(anchors, gt);
    CHECK(t.label[1] == AnchorLabel::kIgnore);
    CHECK(t.provenance[1] == LabelProvenance::kIgnore);
  }
  SECTION("disjoint anchor labeled by teacher") {
    const std::vector<Box> anchors = {{50, 50, 60, 60}};
    const std::vector<GtInstance> gt = {{{0, 0, 10, 10}, 3}};
    const FixedTeacher teacher({50, 50, 60, 60}, 4);
    const AnchorTargets t = assign_anchor_targets(anchors, gt, &teacher);
    CHECK(t.label[0] == AnchorLabel::kPositive);
    CHECK(t.repetition[0] == Catch::Approx(4.0));
    CHECK(t.has_repetition[0] == 1);
    CHECK(t.has_delta[0] == 0);
    CHECK(t.provenance[0] == LabelProvenance::kTeacher);
  }
  SECTION("partially overlapping negative keeps c* masked") {
    const std::vector<Box> anchors = {{0, 0, 10, 10}, {8, 8, 18, 18}};
    const std::vector<GtInstance> gt = {{{0, 0, 10, 10}, 3}};
    const AnchorTargets t = assign_anchor_targets(anchors, gt);
    CHECK(t.label[1] == AnchorLabel::kNegative);
    CHECK(t.has_repetition[1] == 0);
    CHECK(t.provenance[1] == LabelProvenance::kGroundTruth);
  }
  SECTION("no GT and no teacher means all negative, c* masked") {
    const std::vector<Box> anchors = {{0, 0, 10, 10}, {5, 5, 15, 15}};
    const AnchorTargets t = assign_anchor_targets(anchors, {});
    for (size_t i = 0; i < t.size(); ++i) {
      CHECK(t.label[i] == AnchorLabel::kNegative);
      CHECK(t.has_repetition[i] == 0);
    }
  }
  SECTION("every GT box receives a positive anchor") {
    std::mt19937_64 rng(3);
    AnchorConfig cfg;
    cfg.sizes = {8, 16, 32};
    cfg.stride = 8;
    const auto anchors = generate_anchors(cfg, 8, 8);
    std::uniform_real_distribution<double> coord(0, 48), side(4, 16);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<GtInstance> gt;
      for (int g = 0; g < 4; ++g) {
        const double x = coord(rng), y = coord(rng);
        gt.push_back({{x, y, x + side(rng), y + side(rng)}, 4});
      }
      const AnchorTargets t = assign_anchor_targets(anchors, gt);
      for (const GtInstance& g : gt) {
        bool has_positive = false;
        for (size_t i = 0; i < anchors.size(); ++i)
          if (t.label[i] == AnchorLabel::kPositive &&
              iou(anchors[i], g.box) > 0)
            has_positive = true;
        CHECK(has_positive);
      }
    }
  }
}

TEST_CASE("nms") {
  SECTION("singleton") {
    const std::vector<Proposal> in = {{{0, 0, 10, 10}, 0.9, 1, 0}};
    CHECK(nms(in, 0.5).size() == 1);
  }
  SECTION("identical boxes keep the higher score") {
    const std::vector<Proposal> in = {{{0, 0, 10, 10}, 0.8, 1, 0},
                                      {{0, 0, 10, 10}, 0.9, 2, 1}};
    const auto out = nms(in, 0.5);
    REQUIRE(out.size() == 1);
    CHECK(out[0].objectness == Catch::Approx(0.9));
  }
  SECTION("three boxes, one suppression") {
    // a overlaps b heavily; c overlaps both lightly
    const std::vector<Proposal> in = {{{0, 0, 10, 10}, 0.9, 1, 0},
                                      {{1, 0, 11, 10}, 0.8, 1, 1},
                                      {{30, 0, 40, 10}, 0.7, 1, 2}};
    CHECK(iou(in[0].box, in[1].box) > 0.7);
    const auto out = nms(in, 0.5);
    REQUIRE(out.size() == 2);
    CHECK(out[0].objectness == Catch::Approx(0.9));
    CHECK(out[1].objectness == Catch::Approx(0.7));
  }
  SECTION("repetition key") {
    const std::vector<Proposal> in = {{{0, 0, 10, 10}, 0.1, 9, 0},
                                      {{0, 0, 10, 10}, 0.9, 2, 1}};
    const auto out = nms(in, 0.5, NmsKey::kRepetition);
    REQUIRE(out.size() == 1);
    CHECK(out[0].repetition == Catch::Approx(9.0));
  }
}

TEST_CASE("sample_anchor_batch") {
  AnchorTargets t;
  auto fill = [&t](int pos, int neg) {
    t = AnchorTargets{};
    for (int i = 0; i < pos; ++i) t.label.push_back(AnchorLabel::kPositive);
    for (int i = 0; i < neg; ++i) t.label.push_back(AnchorLabel::kNegative);
  };
  SECTION("half and half") {
    fill(100, 1000);
    std::mt19937_64 rng(1);
    const auto idx = sample_anchor_batch(t, 96, rng);
    REQUIRE(idx.size() == 96);
    int pos = 0;
    for (int i : idx)
      if (i < 100) ++pos;
    CHECK(pos == 48);
  }
  SECTION("padding with negatives") {
    fill(10, 1000);
    std::mt19937_64 rng(1);
    const auto idx = sample_anchor_batch(t, 96, rng);
    REQUIRE(idx.size() == 96);
    int pos = 0;
    for (int i : idx)
      if (i < 10) ++pos;
    CHECK(pos == 10);
  }
  SECTION("deterministic under seed") {
    fill(50, 500);
    std::mt19937_64 rng_a(42), rng_b(42);
    CHECK(sample_anchor_batch(t, 96, rng_a) == sample_anchor_batch(t, 96, rng_b));
  }
  SECTION("no sampleable anchors") {
    t = AnchorTargets{};
    t.label.assign(5, AnchorLabel::kIgnore);
    std::mt19937_64 rng(1);
    CHECK(sample_anchor_batch(t, 96, rng).empty());
  }
}
