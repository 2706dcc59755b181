#pragma once

#include <vector>

#include "store3d/common.hpp"

namespace store3d {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point2 p) { return std::sqrt(p.x * p.x + p.y * p.y); }

// BEV footprint box. Yaw is normalized to (-pi, pi] at construction.
struct OrientedBoxBEV {
  Point2 center;
  double yaw = 0.0;
  double length = 0.0;
  double width = 0.0;

  OrientedBoxBEV() = default;
  OrientedBoxBEV(Point2 c, double yaw_in, double l, double w);
};

// Rigid transform in the plane. Rotation normalized to (-pi, pi].
struct SE2Pose {
  Point2 translation;
  double rotation = 0.0;

  SE2Pose() = default;
  SE2Pose(Point2 t, double r) : translation(t), rotation(wrap_angle(r)) {}

  Point2 apply(Point2 p) const;
  SE2Pose inverse() const;
  SE2Pose compose(const SE2Pose& other) const;  // this ∘ other
};

// Convex polygon, CCW winding, no collinear boundary vertices.
// Construct through convex_hull() or from_hull_vertices().
class ConvexPolygon {
 public:
  ConvexPolygon() = default;  // empty placeholder; fill via the factories
  static ConvexPolygon from_hull_vertices(std::vector<Point2> verts);

  const std::vector<Point2>& vertices() const { return vertices_; }
  int size() const { return static_cast<int>(vertices_.size()); }
  double area() const;
  bool contains(Point2 p, double tol = 1e-9) const;

 private:
  std::vector<Point2> vertices_;
};

// Corners in CCW order: front-left, rear-left, rear-right, front-right.
std::vector<Point2> box_corners(const OrientedBoxBEV& box);

// Monotone chain hull; collinear boundary points removed.
// Throws DegenerateInput for < 3 distinct points or all-collinear input.
ConvexPolygon convex_hull(std::vector<Point2> points);

// Minimum distance between two convex polygons. Zero when they overlap or
// touch (decided by a separating-axis test over both edge-normal sets),
// otherwise the minimum over all edge-segment pairs.
double polygon_distance(const ConvexPolygon& p, const ConvexPolygon& q);

// True iff no separating axis exists among both polygons' edge normals.
bool polygons_overlap(const ConvexPolygon& p, const ConvexPolygon& q);

OrientedBoxBEV transform_box(const SE2Pose& pose, const OrientedBoxBEV& box);

double segment_distance(Point2 a0, Point2 a1, Point2 b0, Point2 b1);
double point_segment_distance(Point2 p, Point2 a, Point2 b);

}  // namespace store3d
