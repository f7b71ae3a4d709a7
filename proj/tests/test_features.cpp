#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "repcount/dataio.hpp"
#include "repcount/features.hpp"

using namespace repcount;

namespace {

AnnotatedImage sample_scene(uint64_t seed) {
  SceneSpec spec;
  spec.classes = {ClassSpec{ShapeKind::kCircle, 4, 6, 6, 10}};
  std::mt19937_64 rng(seed);
  return generate_scene(spec, rng);
}

}  // namespace

TEST_CASE("toy backbone") {
  const ToyBackbone bb(64);
  const AnnotatedImage scene = sample_scene(5);

  SECTION("stride arithmetic") {
    const FeatureMap fm = bb.extract(scene.image);
    CHECK(fm.channels() == 64);
    CHECK(fm.hf() == 4);
    CHECK(fm.wf() == 4);
    CHECK(fm.stride == 16);
  }
  SECTION("non-multiple sizes pad up") {
    Image img(50, 70);
    const FeatureMap fm = bb.extract(img);
    CHECK(fm.hf() == 4);   // 50 -> 64 -> /16
    CHECK(fm.wf() == 5);   // 70 -> 80 -> /16
  }
  SECTION("frozen and deterministic") {
    const ToyBackbone other(64);
    const FeatureMap a = bb.extract(scene.image);
    const FeatureMap b = other.extract(scene.image);
    REQUIRE(a.values.data.size() == b.values.data.size());
    CHECK((a.values.data - b.values.data).abs().maxCoeff() == 0.0);
  }
  SECTION("features respond to content") {
    const FeatureMap a = bb.extract(scene.image);
    const FeatureMap b = bb.extract(sample_scene(6).image);
    CHECK((a.values.data - b.values.data).abs().maxCoeff() > 1e-6);
    // unit RMS normalization
    CHECK(std::sqrt(a.values.data.square().mean()) == Catch::Approx(1.0));
  }
  SECTION("per-location variation") {
    const FeatureMap fm = bb.extract(scene.image);
    // columns of the sequence view must not all be equal
    double max_loc_diff = 0;
    for (int ch = 0; ch < fm.channels(); ++ch) {
      const auto plane = fm.values.data.segment(
          static_cast<Eigen::Index>(ch) * fm.hf() * fm.wf(), fm.hf() * fm.wf());
      max_loc_diff = std::max(max_loc_diff, plane.maxCoeff() - plane.minCoeff());
    }
    CHECK(max_loc_diff > 1e-6);
  }
}

TEST_CASE("positional embeddings") {
  SECTION("row/column factorization") {
    const int d = 16, m = d / 2;
    const Eigen::MatrixXd e = positional_embeddings(5, 7, d);
    REQUIRE(e.rows() == 35);
    // same row -> identical first half
    CHECK((e.row(2 * 7 + 1).head(m) - e.row(2 * 7 + 6).head(m)).norm() == 0.0);
    // same column -> identical second half
    CHECK((e.row(0 * 7 + 3).tail(m) - e.row(4 * 7 + 3).tail(m)).norm() == 0.0);
    // different rows differ in the first half
    CHECK((e.row(0).head(m) - e.row(3 * 7).head(m)).norm() > 1e-9);
  }
  SECTION("pairwise distinct locations up to 64x64") {
    const int d = 8;
    const Eigen::MatrixXd e = positional_embeddings(64, 64, d);
    std::vector<std::vector<double>> rows;
    rows.reserve(static_cast<size_t>(e.rows()));
    for (Eigen::Index r = 0; r < e.rows(); ++r) {
      std::vector<double> v(d);
      for (int c = 0; c < d; ++c) v[static_cast<size_t>(c)] = e(r, c);
      rows.push_back(std::move(v));
    }
    std::sort(rows.begin(), rows.end());
    CHECK(std::adjacent_find(rows.begin(), rows.end()) == rows.end());
  }
  SECTION("odd dimension rejected") {
    CHECK_THROWS(positional_embeddings(4, 4, 7));
  }
}

TEST_CASE("sequence reshape") {
  FeatureMap fm;
  fm.values = ad::Tensor::zeros({3, 2, 2});
  fm.stride = 16;
  // distinct marker per (channel, location)
  for (Eigen::Index i = 0; i < fm.values.data.size(); ++i)
    fm.values.data[i] = static_cast<double>(i) + 1;

  SECTION("layout and round trip") {
    const Eigen::MatrixXd zero_pos = Eigen::MatrixXd::Zero(4, 3);
    const Eigen::MatrixXd s = to_sequence(fm, zero_pos);
    REQUIRE(s.rows() == 4);
    REQUIRE(s.cols() == 3);
    // row r*wf+c carries channel ch at column ch
    CHECK(s(0, 0) == 1.0);   // ch0,(0,0)
    CHECK(s(1, 0) == 2.0);   // ch0,(0,1)
    CHECK(s(2, 0) == 3.0);   // ch0,(1,0)
    CHECK(s(0, 1) == 5.0);   // ch1,(0,0)
    CHECK(s(3, 2) == 12.0);  // ch2,(1,1)
    const ad::Tensor back = from_sequence(s, 2, 2);
    CHECK((back.data - fm.values.data).abs().maxCoeff() == 0.0);
  }
  SECTION("embeddings are added") {
    Eigen::MatrixXd pos = Eigen::MatrixXd::Constant(4, 3, 0.25);
    const Eigen::MatrixXd s = to_sequence(fm, pos);
    CHECK(s(0, 0) == 1.25);
  }
  SECTION("shape mismatches rejected") {
    const Eigen::MatrixXd wrong = Eigen::MatrixXd::Zero(4, 5);
    CHECK_THROWS(to_sequence(fm, wrong));
    CHECK_THROWS(from_sequence(Eigen::MatrixXd::Zero(5, 3), 2, 2));
  }
  SECTION("projection bridges channel width") {
    const Eigen::MatrixXd proj = Eigen::MatrixXd::Identity(3, 3) * 2.0;
    const Eigen::MatrixXd pos = Eigen::MatrixXd::Zero(4, 3);
    const Eigen::MatrixXd s = to_sequence(fm, pos, &proj);
    CHECK(s(0, 0) == 2.0);
  }
}
