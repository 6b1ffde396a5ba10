#include "autoassign/geometry.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <random>
#include <set>

using namespace autoassign;
using autoassign::testing::random_values;
using autoassign::testing::values;

namespace {

Boxd random_box(std::mt19937_64& rng, double extent = 40.0) {
  std::uniform_real_distribution<double> pos(0.0, extent);
  std::uniform_real_distribution<double> size(1.0, extent / 2);
  const double x = pos(rng);
  const double y = pos(rng);
  return {x, y, x + size(rng), y + size(rng)};
}

const std::vector<PyramidLevelSpec> kTwoByTwo{{4, 2, 2}};

}  // namespace

TEST_CASE("make_locations") {
  SUBCASE("cell centers") {
    const LocationSet s = make_locations(kTwoByTwo);
    REQUIRE(s.size() == 4);
    CHECK(s.xy(0, 0) == 2.0);
    CHECK(s.xy(0, 1) == 2.0);
    CHECK(s.xy(1, 0) == 6.0);
    CHECK(s.xy(1, 1) == 2.0);
    CHECK(s.xy(2, 0) == 2.0);
    CHECK(s.xy(2, 1) == 6.0);
    CHECK(s.xy(3, 0) == 6.0);
    CHECK(s.xy(3, 1) == 6.0);
  }
  SUBCASE("two levels, level-major") {
    const std::vector<PyramidLevelSpec> specs{{4, 2, 2}, {8, 1, 1}};
    const LocationSet s = make_locations(specs);
    REQUIRE(s.size() == 5);
    CHECK(s.xy(4, 0) == 4.0);
    CHECK(s.xy(4, 1) == 4.0);
    CHECK(s.level[4] == 1);
    CHECK(s.stride(4) == 8.0);
    const auto [l, r, c] = s.grid_position(3);
    CHECK(l == 0);
    CHECK(r == 1);
    CHECK(c == 1);
    CHECK(s.global_index(1, 0, 0) == 4);
  }
  SUBCASE("single coarse cell") {
    const std::vector<PyramidLevelSpec> specs{{8, 1, 1}};
    const LocationSet s = make_locations(specs);
    CHECK(s.size() == 1);
    CHECK(s.xy(0, 0) == 4.0);
  }
  SUBCASE("rejections") {
    const std::vector<PyramidLevelSpec> empty_level{{4, 0, 2}};
    CHECK_THROWS(make_locations(empty_level));
    CHECK_THROWS(make_locations(std::span<const PyramidLevelSpec>{}));
    const std::vector<PyramidLevelSpec> unordered{{8, 2, 2}, {4, 2, 2}};
    CHECK_THROWS(make_locations(unordered));
  }
}

TEST_CASE("inside_mask") {
  const LocationSet s = make_locations(kTwoByTwo);
  CHECK(inside_mask(s, {0, 0, 8, 8}).indices.size() == 4);
  const InBoxIndex small = inside_mask(s, {0, 0, 3, 3});
  REQUIRE(small.indices.size() == 1);
  CHECK(small.indices[0] == 0);
  CHECK(inside_mask(s, {100, 100, 120, 120}).indices.empty());
  SUBCASE("edge policy") {
    // Edge at x = 6 passes through two location centers.
    CHECK(inside_mask(s, {0, 0, 6, 8}).indices.size() == 2);
    CHECK(inside_mask(s, {0, 0, 6, 8}, -1, EdgePolicy::kInclusive).indices.size() == 4);
  }
}

TEST_CASE("inside_mask over disjoint boxes never double-assigns") {
  const std::vector<PyramidLevelSpec> specs{{4, 8, 8}, {8, 4, 4}};
  const LocationSet s = make_locations(specs);
  const std::vector<Boxd> boxes{{0, 0, 14, 14}, {15, 0, 31, 12}, {2, 16, 30, 30}};
  std::multiset<Index> seen;
  std::size_t total = 0;
  for (const Boxd& b : boxes) {
    const auto idx = inside_mask(s, b).indices;
    total += idx.size();
    seen.insert(idx.begin(), idx.end());
  }
  CHECK(seen.size() == total);
  CHECK(std::set<Index>(seen.begin(), seen.end()).size() == total);
}

TEST_CASE("center_offsets") {
  const LocationSet s = make_locations(kTwoByTwo);
  const std::vector<Index> idx{1};
  const Eigen::ArrayX2d d = center_offsets(s, idx, {0, 0, 8, 8});
  CHECK(d(0, 0) == 0.5);
  CHECK(d(0, 1) == -0.5);

  const std::vector<Index> first{0};
  CHECK((center_offsets(s, first, {0, 0, 4, 4}) == 0.0).all());

  // The same 8 pixel offset along x at stride 8 and at stride 4.
  const std::vector<PyramidLevelSpec> coarse{{8, 2, 2}};
  const LocationSet c = make_locations(coarse);
  const std::vector<Index> c_idx{1};
  CHECK(center_offsets(c, c_idx, {0, 0, 8, 8})(0, 0) == 1.0);
  CHECK(center_offsets(s, idx, {-6, 0, 2, 8})(0, 0) == 2.0);
}

TEST_CASE("center offset at the box center is zero at any stride") {
  for (int stride : {4, 8, 16}) {
    const std::vector<PyramidLevelSpec> specs{{stride, 3, 3}};
    const LocationSet s = make_locations(specs);
    const std::vector<Index> mid{4};
    const double c = 1.5 * stride;
    CHECK((center_offsets(s, mid, {c - 5, c - 7, c + 5, c + 7}) == 0.0).all());
  }
}

TEST_CASE("iou") {
  const Boxd a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Boxd{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  CHECK(iou(a, Boxd{5, 5, 6, 6}) == 0.0);
}

TEST_CASE("iou is symmetric, translation- and scale-invariant") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  std::uniform_real_distribution<double> scale(0.1, 10.0);
  for (int i = 0; i < 200; ++i) {
    const Boxd a = random_box(rng);
    const Boxd b = random_box(rng);
    const double v = iou(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(iou(b, a) == doctest::Approx(v).epsilon(1e-12));
    const double dx = shift(rng);
    const double dy = shift(rng);
    CHECK(iou(a.translated(dx, dy), b.translated(dx, dy)) == doctest::Approx(v).epsilon(1e-9));
    const double c = scale(rng);
    CHECK(iou(a.scaled(c), b.scaled(c)) == doctest::Approx(v).epsilon(1e-9));
  }
}

TEST_CASE("giou_loss") {
  const Boxd a{0, 0, 2, 2};
  CHECK(giou_loss(a, a) == 0.0);
  CHECK(std::abs(giou_loss(a, Boxd{1, 1, 3, 3}) - (1.0 + 5.0 / 63.0)) < 1e-12);
  double previous = 0.0;
  for (double gap : {1.0, 10.0, 100.0, 1000.0}) {
    const double v = giou_loss(Boxd{0, 0, 1, 1}, Boxd{gap + 1, 0, gap + 2, 1});
    CHECK(v > previous);
    CHECK(v < 2.0);
    previous = v;
  }
  CHECK(previous > 1.99);
}

TEST_CASE("giou_loss bounds on random pairs") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const Boxd a = random_box(rng);
    const Boxd b = random_box(rng);
    CHECK(giou_loss(a, a) == 0.0);
    const double v = giou_loss(a, b);
    CHECK(v >= 1.0 - iou(a, b) - 1e-12);
    CHECK(v < 2.0);
  }
}

TEST_CASE("ltrb decode and encode") {
  const Boxd b = ltrb_decode(4, 4, Eigen::Array4d(1, 1, 1, 1));
  CHECK(b == Boxd{3, 3, 5, 5});
  CHECK(ltrb_decode(4, 4, Eigen::Array4d(0, 0, 2, 2)) == Boxd{4, 4, 6, 6});
  const Eigen::Array4d off(1.25, 0.5, 3.0, 2.75);
  CHECK((ltrb_encode(4, 4, ltrb_decode(4, 4, off)) == off).all());
  CHECK_THROWS(ltrb_decode(4, 4, Eigen::Array4d(0, 1, 0, 1)));
  CHECK_THROWS(ltrb_decode(4, 4, Eigen::Array4d(-1, 1, 2, 1)));
}

TEST_CASE("differentiable giou matches the scalar form and passes grad_check") {
  std::mt19937_64 rng(99);
  for (int seed = 0; seed < 10; ++seed) {
    const Index n = 4;
    Eigen::ArrayX2d xy(n, 2);
    xy.col(0) = random_values(rng, n, 8, 24);
    xy.col(1) = random_values(rng, n, 8, 24);
    const Eigen::ArrayXd ltrb = random_values(rng, n * 4, 1.0, 9.0);
    const Boxd gt = {6, 5, 22, 25};

    const DiffArray decoded = ltrb_decode(DiffArray::constant({n, 4}, ltrb), xy);
    const DiffArray loss = giou_loss(decoded, gt);
    for (Index i = 0; i < n; ++i) {
      const Boxd pred = ltrb_decode(xy(i, 0), xy(i, 1), ltrb.segment<4>(4 * i));
      CHECK(loss.values()(i) == doctest::Approx(giou_loss(pred, gt)).epsilon(1e-12));
    }

    const Eigen::ArrayXd weights = random_values(rng, n, 0.5, 1.5);
    const std::vector<GradInput> inputs{{{n, 4}, ltrb}};
    const auto f = [&](std::span<const DiffArray> in) {
      return sum(giou_loss(ltrb_decode(in[0], xy), gt) * DiffArray::constant({n}, weights));
    };
    const GradCheckReport r = grad_check(f, inputs);
    INFO("seed " << seed << " max rel error " << r.max_rel_error);
    CHECK(r.max_rel_error < 1e-4);
  }
}
