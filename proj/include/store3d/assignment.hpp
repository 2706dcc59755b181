#pragma once

#include <string>
#include <vector>

#include "store3d/common.hpp"
#include "store3d/geometry.hpp"

namespace store3d {

struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> costs;  // row-major

  double at(int r, int c) const { return costs[static_cast<size_t>(r) * cols + c]; }
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), |pairs| = min(rows, cols)
  double total_cost = 0.0;
};

// Globally optimal min-cost assignment (Jonker-Volgenant shortest augmenting
// path on the square-padded matrix). Rectangular inputs allowed.
// Throws NonFiniteCost on NaN/Inf entries.
Assignment hungarian(const CostMatrix& c);

struct ScoredPoint {
  Point2 center;
  double score = 0.0;
  std::string class_name;
};

struct GtPoint {
  Point2 center;
  std::string class_name;
};

// Greedy matching by descending detection score (ties broken by lower index);
// each detection takes its nearest unmatched same-class ground truth within
// center_threshold meters. Returns (detection index, gt index) pairs.
std::vector<std::pair<int, int>> greedy_match(const std::vector<ScoredPoint>& detections,
                                              const std::vector<GtPoint>& gts,
                                              double center_threshold);

}  // namespace store3d
