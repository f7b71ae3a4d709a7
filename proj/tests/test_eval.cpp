#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "repcount/eval.hpp"

using namespace repcount;

TEST_CASE("topk count estimate") {
  const std::vector<Box> gt = {{0, 0, 10, 10}, {20, 20, 30, 30}};

  SECTION("keeps only overlapping proposals") {
    // IoUs against gt: 0.5, 0.4, ~0.1 -> keep the first two
    const std::vector<ProposalCount> top = {
        {{0, 0, 10, 15}, 9.0},        // IoU 2/3 vs gt0
        {{20, 20, 30, 36}, 12.0},     // IoU 0.625 vs gt1
        {{8, 8, 14, 14}, 100.0}};     // IoU 4/132 vs gt0
    CHECK(topk_count_estimate(top, gt) == Catch::Approx(10.5));
  }
  SECTION("fallback to the mean when nothing overlaps") {
    const std::vector<ProposalCount> top = {{{40, 40, 50, 50}, 4.0},
                                            {{50, 0, 60, 10}, 6.0}};
    CHECK(topk_count_estimate(top, gt) == Catch::Approx(5.0));
  }
  SECTION("k = 1") {
    const std::vector<ProposalCount> top = {{{0, 0, 10, 10}, 7.0}};
    CHECK(topk_count_estimate(top, gt) == Catch::Approx(7.0));
  }
  SECTION("empty proposals rejected") {
    CHECK_THROWS(topk_count_estimate({}, gt));
  }
  SECTION("no gt boxes falls back to the mean") {
    const std::vector<ProposalCount> top = {{{0, 0, 5, 5}, 2.0},
                                            {{6, 6, 9, 9}, 4.0}};
    CHECK(topk_count_estimate(top, {}) == Catch::Approx(3.0));
  }
  SECTION("order invariance") {
    std::vector<ProposalCount> top = {{{0, 0, 10, 15}, 9.0},
                                      {{20, 20, 30, 36}, 12.0},
                                      {{40, 40, 50, 50}, 3.0}};
    const double a = topk_count_estimate(top, gt);
    std::reverse(top.begin(), top.end());
    CHECK(topk_count_estimate(top, gt) == Catch::Approx(a));
  }
}

TEST_CASE("mae and rmse") {
  SECTION("single pair") {
    const auto [mae, rmse] = mae_rmse({{10.0, 12.0}});
    CHECK(mae == Catch::Approx(2.0));
    CHECK(rmse == Catch::Approx(2.0));
  }
  SECTION("hand-computed pair set") {
    const auto [mae, rmse] = mae_rmse({{0.0, 3.0}, {0.0, 4.0}});
    CHECK(mae == Catch::Approx(3.5));
    CHECK(rmse == Catch::Approx(std::sqrt(12.5)));
  }
  SECTION("perfect predictions") {
    const auto [mae, rmse] = mae_rmse({{5.0, 5.0}, {9.0, 9.0}});
    CHECK(mae == 0.0);
    CHECK(rmse == 0.0);
  }
  SECTION("empty rejected") { CHECK_THROWS(mae_rmse({})); }
  SECTION("matches a brute-force reference on random records") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> v(0.0, 50.0);
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < 100; ++i) pairs.emplace_back(v(rng), v(rng));
    double abs_sum = 0, sq_sum = 0;
    for (const auto& [y, yh] : pairs) {
      abs_sum += std::abs(y - yh);
      sq_sum += (y - yh) * (y - yh);
    }
    const auto [mae, rmse] = mae_rmse(pairs);
    CHECK(mae == Catch::Approx(abs_sum / 100.0));
    CHECK(rmse == Catch::Approx(std::sqrt(sq_sum / 100.0)));
    CHECK(rmse >= mae);  // Jensen
  }
}

TEST_CASE("fast count from repetition scores") {
  const std::vector<Box> gt = {{0, 0, 10, 10}};
  auto mk = [](Box b, double rep) {
    Proposal p;
    p.box = b;
    p.repetition = rep;
    return p;
  };
  // IoUs: 2/3, 0.64, 0 -> keep 30 and 10
  const std::vector<Proposal> top = {mk({0, 0, 10, 15}, 30.0),
                                     mk({0, 0, 8, 8}, 10.0),
                                     mk({30, 30, 40, 40}, 2.0)};
  CHECK(fast_count(top, gt) == Catch::Approx(20.0));
}

TEST_CASE("run_eval end to end") {
  SceneSpec spec;
  spec.classes = {ClassSpec{ShapeKind::kCircle, 4, 6, 5, 8},
                  ClassSpec{ShapeKind::kSquare, 4, 6, 5, 8}};
  std::mt19937_64 rng(31);
  std::vector<AnnotatedImage> dataset;
  for (int i = 0; i < 2; ++i) {
    AnnotatedImage im = generate_scene(spec, rng);
    im.name = "e" + std::to_string(i) + ".ppm";
    dataset.push_back(std::move(im));
  }

  TrainConfig cfg;
  cfg.rpn.d = 16;
  cfg.rpn.layers = 1;
  cfg.rpn.heads = 2;
  cfg.backbone_channels = 16;
  cfg.anchors.sizes = {8, 12};
  cfg.anchors.aspect_ratios = {1.0};
  cfg.rpn.anchors_per_location = cfg.anchors.anchors_per_location();
  cfg.dpn.channels = {8, 8, 4, 4, 1};
  const ToyBackbone backbone(cfg.backbone_channels, cfg.backbone_seed);
  std::mt19937_64 prng(1);
  RepRpnParams rpn = RepRpnParams::init(cfg.rpn, prng);
  DpnParams dpn = DpnParams::init(cfg.dpn, prng);

  SECTION("fast mode report structure") {
    EvalOptions opts;
    opts.ks = {1, 3};
    opts.use_dpn = false;
    const EvalReport r = run_eval(dataset, backbone, rpn, nullptr, cfg, opts);
    CHECK(r.json["mode"] == "fast");
    CHECK(r.json["teacher"] == "oracle");
    CHECK(r.json["teacher_anchor_total"].get<long>() > 0);
    REQUIRE(r.json["metrics"].contains("top1"));
    REQUIRE(r.json["metrics"].contains("top3"));
    CHECK(r.json["metrics"]["top1"]["mae"].get<double>() >= 0.0);
    CHECK(r.json["metrics"]["top1"]["rmse"].get<double>() >=
          r.json["metrics"]["top1"]["mae"].get<double>());
    REQUIRE(r.json["images"].size() == 2);
    for (const auto& im : r.json["images"]) {
      CHECK(im["gt_count"].get<double>() >= 5.0);
      CHECK(im["proposals"].size() <= 3);
    }
  }
  SECTION("dpn mode uses density counts") {
    EvalOptions opts;
    opts.ks = {1};
    const EvalReport r = run_eval(dataset, backbone, rpn, &dpn, cfg, opts);
    CHECK(r.json["mode"] == "dpn");
    REQUIRE(r.json["metrics"].contains("top1"));
  }
  SECTION("deterministic report") {
    EvalOptions opts;
    opts.ks = {1, 3};
    opts.use_dpn = false;
    const EvalReport a = run_eval(dataset, backbone, rpn, nullptr, cfg, opts);
    const EvalReport b = run_eval(dataset, backbone, rpn, nullptr, cfg, opts);
    CHECK(a.json.dump() == b.json.dump());
  }
  SECTION("teacher none reports zero teacher anchors") {
    TrainConfig c2 = cfg;
    c2.teacher = "none";
    EvalOptions opts;
    opts.ks = {1};
    opts.use_dpn = false;
    const EvalReport r = run_eval(dataset, backbone, rpn, nullptr, c2, opts);
    CHECK(r.json["teacher_anchor_total"].get<long>() == 0);
  }
}
