#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "store3d/geometry.hpp"
#include "store3d/rng.hpp"

using namespace store3d;

namespace {

bool contains_point(const std::vector<Point2>& pts, Point2 q, double tol = 1e-9) {
  return std::any_of(pts.begin(), pts.end(), [&](Point2 p) {
    return std::abs(p.x - q.x) < tol && std::abs(p.y - q.y) < tol;
  });
}

ConvexPolygon unit_square_at(double cx, double cy) {
  return convex_hull({{cx - 0.5, cy - 0.5},
                      {cx + 0.5, cy - 0.5},
                      {cx + 0.5, cy + 0.5},
                      {cx - 0.5, cy + 0.5}});
}

}  // namespace

TEST_CASE("box_corners axis aligned") {
  OrientedBoxBEV box({0, 0}, 0.0, 2.0, 1.0);
  auto corners = box_corners(box);
  REQUIRE(corners.size() == 4);
  CHECK(contains_point(corners, {1.0, 0.5}));
  CHECK(contains_point(corners, {-1.0, 0.5}));
  CHECK(contains_point(corners, {-1.0, -0.5}));
  CHECK(contains_point(corners, {1.0, -0.5}));
}

TEST_CASE("box_corners quarter turn") {
  OrientedBoxBEV box({0, 0}, kPi / 2, 2.0, 1.0);
  auto corners = box_corners(box);
  CHECK(contains_point(corners, {0.5, 1.0}));
  CHECK(contains_point(corners, {-0.5, 1.0}));
  CHECK(contains_point(corners, {-0.5, -1.0}));
  CHECK(contains_point(corners, {0.5, -1.0}));
}

TEST_CASE("box_corners centroid equals center") {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    OrientedBoxBEV box({rng.uniform(-50, 50), rng.uniform(-50, 50)},
                       rng.uniform(-4, 4), rng.uniform(0.5, 8), rng.uniform(0.5, 4));
    auto corners = box_corners(box);
    double cx = 0, cy = 0;
    for (auto p : corners) {
      cx += p.x;
      cy += p.y;
    }
    CHECK(std::abs(cx / 4 - box.center.x) < 1e-9);
    CHECK(std::abs(cy / 4 - box.center.y) < 1e-9);
  }
}

TEST_CASE("convex_hull drops interior point") {
  auto hull = convex_hull({{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0.5, 0.5}});
  CHECK(hull.size() == 4);
  CHECK(hull.area() == doctest::Approx(1.0));
}

TEST_CASE("convex_hull triangle identity and ccw") {
  auto hull = convex_hull({{0, 0}, {2, 0}, {0, 2}});
  REQUIRE(hull.size() == 3);
  CHECK(hull.area() > 0.0);  // CCW winding
  CHECK(contains_point(hull.vertices(), {0, 0}));
  CHECK(contains_point(hull.vertices(), {2, 0}));
  CHECK(contains_point(hull.vertices(), {0, 2}));
}

TEST_CASE("convex_hull degenerate inputs") {
  CHECK_THROWS_AS(convex_hull({{0, 0}, {1, 1}}), DegenerateInput);
  CHECK_THROWS_AS(convex_hull({{0, 0}, {1, 1}, {2, 2}, {3, 3}}), DegenerateInput);
  CHECK_THROWS_AS(convex_hull({{1, 1}, {1, 1}, {1, 1}}), DegenerateInput);
}

TEST_CASE("convex_hull contains all inputs and is idempotent") {
  Rng rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<Point2> pts;
    for (int i = 0; i < 1000; ++i) {
      double r = std::sqrt(rng.uniform());
      double a = rng.uniform(0, 2 * kPi);
      pts.push_back({3.0 * r * std::cos(a), 3.0 * r * std::sin(a)});
    }
    auto hull = convex_hull(pts);
    CHECK(hull.area() <= kPi * 9.0 + 1e-9);
    for (auto p : pts) CHECK(hull.contains(p));

    auto again = convex_hull(hull.vertices());
    REQUIRE(again.size() == hull.size());
    for (auto v : hull.vertices()) CHECK(contains_point(again.vertices(), v));
  }
}

TEST_CASE("polygon_distance axis aligned gap") {
  CHECK(polygon_distance(unit_square_at(0, 0), unit_square_at(3, 0)) ==
        doctest::Approx(2.0));
}

TEST_CASE("polygon_distance overlap and touch are zero") {
  CHECK(polygon_distance(unit_square_at(0, 0), unit_square_at(0.5, 0)) == 0.0);
  CHECK(polygon_distance(unit_square_at(0, 0), unit_square_at(1.0, 0)) == 0.0);
  // Nested: q strictly inside p.
  auto big = convex_hull({{-5, -5}, {5, -5}, {5, 5}, {-5, 5}});
  CHECK(polygon_distance(big, unit_square_at(0, 0)) == 0.0);
}

TEST_CASE("polygon_distance diagonal corner gap") {
  CHECK(polygon_distance(unit_square_at(0, 0), unit_square_at(3, 3)) ==
        doctest::Approx(2.0 * std::sqrt(2.0)));
}

TEST_CASE("polygon_distance symmetry, bound, translation equivariance") {
  Rng rng(13);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<Point2> pa, pb;
    double ox = rng.uniform(-20, 20), oy = rng.uniform(-20, 20);
    for (int i = 0; i < 8; ++i) {
      pa.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2)});
      pb.push_back({ox + rng.uniform(-2, 2), oy + rng.uniform(-2, 2)});
    }
    ConvexPolygon a, b;
    try {
      a = convex_hull(pa);
      b = convex_hull(pb);
    } catch (const DegenerateInput&) {
      continue;
    }
    double d = polygon_distance(a, b);
    CHECK(polygon_distance(b, a) == d);
    for (auto va : a.vertices())
      for (auto vb : b.vertices()) CHECK(d <= norm(va - vb) + 1e-12);
    CHECK((d == 0.0) == polygons_overlap(a, b));

    Point2 shift{rng.uniform(-30, 30), rng.uniform(-30, 30)};
    auto tr = [&](const ConvexPolygon& poly) {
      std::vector<Point2> vs;
      for (auto v : poly.vertices()) vs.push_back(v + shift);
      return ConvexPolygon::from_hull_vertices(vs);
    };
    CHECK(polygon_distance(tr(a), tr(b)) == doctest::Approx(d).epsilon(1e-9));
  }
}

TEST_CASE("transform_box identity, translation, inverse roundtrip") {
  OrientedBoxBEV box({2, 3}, 0.7, 4.0, 2.0);
  SE2Pose id({0, 0}, 0);
  auto same = transform_box(id, box);
  CHECK(same.center.x == box.center.x);
  CHECK(same.center.y == box.center.y);
  CHECK(same.yaw == box.yaw);

  OrientedBoxBEV origin_box({0, 0}, 0.0, 1.0, 1.0);
  auto moved = transform_box(SE2Pose({1, 0}, 0), origin_box);
  CHECK(moved.center.x == doctest::Approx(1.0));
  CHECK(moved.center.y == doctest::Approx(0.0));

  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    SE2Pose pose({rng.uniform(-10, 10), rng.uniform(-10, 10)}, rng.uniform(-3, 3));
    OrientedBoxBEV b({rng.uniform(-10, 10), rng.uniform(-10, 10)},
                     rng.uniform(-3, 3), 3.0, 1.5);
    auto round = transform_box(pose.inverse(), transform_box(pose, b));
    CHECK(std::abs(round.center.x - b.center.x) < 1e-9);
    CHECK(std::abs(round.center.y - b.center.y) < 1e-9);
    CHECK(std::abs(wrap_angle(round.yaw - b.yaw)) < 1e-9);
  }
}

TEST_CASE("yaw normalized at construction") {
  OrientedBoxBEV box({0, 0}, 3 * kPi, 1, 1);
  CHECK(box.yaw == doctest::Approx(kPi));
  OrientedBoxBEV box2({0, 0}, -kPi, 1, 1);
  CHECK(box2.yaw == doctest::Approx(kPi));
}
