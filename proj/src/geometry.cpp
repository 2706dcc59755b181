#include "store3d/geometry.hpp"

#include <algorithm>
#include <limits>

namespace store3d {
namespace {

// Collinearity tolerance scales with the coordinates involved; straight-line
// trajectories produce nearly collinear corner chains that must collapse.
double collinear_tol(Point2 a, Point2 b, Point2 c) {
  double scale = 1.0;
  for (Point2 p : {a, b, c}) {
    scale = std::max({scale, std::abs(p.x), std::abs(p.y)});
  }
  return 1e-12 * scale * scale;
}

double turn(Point2 o, Point2 a, Point2 b) { return cross(a - o, b - o); }

}  // namespace

OrientedBoxBEV::OrientedBoxBEV(Point2 c, double yaw_in, double l, double w)
    : center(c), yaw(wrap_angle(yaw_in)), length(l), width(w) {
  if (!(l > 0.0) || !(w > 0.0)) {
    throw DegenerateInput("box dimensions must be positive");
  }
}

Point2 SE2Pose::apply(Point2 p) const {
  double c = std::cos(rotation), s = std::sin(rotation);
  return {c * p.x - s * p.y + translation.x, s * p.x + c * p.y + translation.y};
}

SE2Pose SE2Pose::inverse() const {
  double c = std::cos(rotation), s = std::sin(rotation);
  return SE2Pose({-(c * translation.x + s * translation.y),
                  -(-s * translation.x + c * translation.y)},
                 -rotation);
}

SE2Pose SE2Pose::compose(const SE2Pose& other) const {
  return SE2Pose(apply(other.translation), rotation + other.rotation);
}

ConvexPolygon ConvexPolygon::from_hull_vertices(std::vector<Point2> verts) {
  if (verts.size() < 3) throw DegenerateInput("polygon needs >= 3 vertices");
  ConvexPolygon poly;
  poly.vertices_ = std::move(verts);
  return poly;
}

double ConvexPolygon::area() const {
  double a = 0.0;
  int n = size();
  for (int i = 0; i < n; ++i) {
    a += cross(vertices_[i], vertices_[(i + 1) % n]);
  }
  return 0.5 * a;
}

bool ConvexPolygon::contains(Point2 p, double tol) const {
  int n = size();
  for (int i = 0; i < n; ++i) {
    Point2 a = vertices_[i], b = vertices_[(i + 1) % n];
    if (turn(a, b, p) < -tol * std::max(1.0, norm(b - a))) return false;
  }
  return true;
}

std::vector<Point2> box_corners(const OrientedBoxBEV& box) {
  double c = std::cos(box.yaw), s = std::sin(box.yaw);
  double hl = 0.5 * box.length, hw = 0.5 * box.width;
  // Local CCW order: (+l,+w), (-l,+w), (-l,-w), (+l,-w).
  std::vector<Point2> out(4);
  const double lx[4] = {hl, -hl, -hl, hl};
  const double ly[4] = {hw, hw, -hw, -hw};
  for (int i = 0; i < 4; ++i) {
    out[i] = {c * lx[i] - s * ly[i] + box.center.x,
              s * lx[i] + c * ly[i] + box.center.y};
  }
  return out;
}

ConvexPolygon convex_hull(std::vector<Point2> points) {
  std::sort(points.begin(), points.end(), [](Point2 a, Point2 b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  points.erase(std::unique(points.begin(), points.end(),
                           [](Point2 a, Point2 b) {
                             return a.x == b.x && a.y == b.y;
                           }),
               points.end());
  int n = static_cast<int>(points.size());
  if (n < 3) throw DegenerateInput("hull needs >= 3 distinct points");

  std::vector<Point2> hull(2 * n);
  int k = 0;
  for (int i = 0; i < n; ++i) {  // lower chain
    while (k >= 2 && turn(hull[k - 2], hull[k - 1], points[i]) <=
                         collinear_tol(hull[k - 2], hull[k - 1], points[i])) {
      --k;
    }
    hull[k++] = points[i];
  }
  for (int i = n - 2, lower = k + 1; i >= 0; --i) {  // upper chain
    while (k >= lower && turn(hull[k - 2], hull[k - 1], points[i]) <=
                             collinear_tol(hull[k - 2], hull[k - 1], points[i])) {
      --k;
    }
    hull[k++] = points[i];
  }
  hull.resize(k - 1);
  if (hull.size() < 3) throw DegenerateInput("input points are collinear");
  return ConvexPolygon::from_hull_vertices(std::move(hull));
}

double point_segment_distance(Point2 p, Point2 a, Point2 b) {
  Point2 ab = b - a;
  double len2 = dot(ab, ab);
  if (len2 <= 0.0) return norm(p - a);
  double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return norm(p - (a + t * ab));
}

double segment_distance(Point2 a0, Point2 a1, Point2 b0, Point2 b1) {
  // Proper crossing means distance zero.
  double d1 = cross(a1 - a0, b0 - a0);
  double d2 = cross(a1 - a0, b1 - a0);
  double d3 = cross(b1 - b0, a0 - b0);
  double d4 = cross(b1 - b0, a1 - b0);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) &&
      ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) {
    return 0.0;
  }
  return std::min(std::min(point_segment_distance(a0, b0, b1),
                           point_segment_distance(a1, b0, b1)),
                  std::min(point_segment_distance(b0, a0, a1),
                           point_segment_distance(b1, a0, a1)));
}

namespace {

void project(const ConvexPolygon& poly, Point2 axis, double* lo, double* hi) {
  *lo = std::numeric_limits<double>::infinity();
  *hi = -std::numeric_limits<double>::infinity();
  for (Point2 v : poly.vertices()) {
    double d = dot(v, axis);
    *lo = std::min(*lo, d);
    *hi = std::max(*hi, d);
  }
}

bool has_separating_axis(const ConvexPolygon& p, const ConvexPolygon& q) {
  for (const ConvexPolygon* poly : {&p, &q}) {
    const auto& vs = poly->vertices();
    int n = static_cast<int>(vs.size());
    for (int i = 0; i < n; ++i) {
      Point2 e = vs[(i + 1) % n] - vs[i];
      Point2 axis{-e.y, e.x};
      double plo, phi, qlo, qhi;
      project(p, axis, &plo, &phi);
      project(q, axis, &qlo, &qhi);
      if (plo > qhi || qlo > phi) return true;
    }
  }
  return false;
}

}  // namespace

bool polygons_overlap(const ConvexPolygon& p, const ConvexPolygon& q) {
  return !has_separating_axis(p, q);
}

double polygon_distance(const ConvexPolygon& p, const ConvexPolygon& q) {
  if (polygons_overlap(p, q)) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  const auto& pv = p.vertices();
  const auto& qv = q.vertices();
  int np = static_cast<int>(pv.size()), nq = static_cast<int>(qv.size());
  for (int i = 0; i < np; ++i) {
    Point2 a0 = pv[i], a1 = pv[(i + 1) % np];
    for (int j = 0; j < nq; ++j) {
      Point2 b0 = qv[j], b1 = qv[(j + 1) % nq];
      best = std::min(best, segment_distance(a0, a1, b0, b1));
    }
  }
  return best;
}

OrientedBoxBEV transform_box(const SE2Pose& pose, const OrientedBoxBEV& box) {
  return OrientedBoxBEV(pose.apply(box.center), box.yaw + pose.rotation,
                        box.length, box.width);
}

}  // namespace store3d
