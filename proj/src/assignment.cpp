#include "store3d/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace store3d {

Assignment hungarian(const CostMatrix& c) {
  if (c.rows <= 0 || c.cols <= 0 ||
      c.costs.size() != static_cast<size_t>(c.rows) * c.cols) {
    throw ShapeMismatch("cost matrix dims");
  }
  double max_abs = 0.0;
  for (double v : c.costs) {
    if (!std::isfinite(v)) throw NonFiniteCost("cost matrix entry");
    max_abs = std::max(max_abs, std::abs(v));
  }

  // Square-pad with a large finite cost so dummy pairings never displace a
  // cheaper real one.
  const int n = std::max(c.rows, c.cols);
  const double pad = 1e6 * std::max(1.0, max_abs);
  auto cost_at = [&](int r, int col) {
    return (r < c.rows && col < c.cols) ? c.at(r, col) : pad;
  };

  // Jonker-Volgenant style shortest augmenting path, 1-indexed potentials.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = 0;
      double delta = std::numeric_limits<double>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost_at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  Assignment out;
  for (int j = 1; j <= n; ++j) {
    int i = p[j];
    if (i >= 1 && i <= c.rows && j <= c.cols) {
      out.pairs.emplace_back(i - 1, j - 1);
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  // Sum in row order so the total is reproducible independent of the
  // augmenting-path discovery order.
  for (auto [r, col] : out.pairs) out.total_cost += c.at(r, col);
  return out;
}

std::vector<std::pair<int, int>> greedy_match(const std::vector<ScoredPoint>& detections,
                                              const std::vector<GtPoint>& gts,
                                              double center_threshold) {
  std::vector<int> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return detections[a].score > detections[b].score;
  });

  std::vector<char> taken(gts.size(), 0);
  std::vector<std::pair<int, int>> matches;
  for (int di : order) {
    const auto& det = detections[di];
    int best = -1;
    double best_dist = 0.0;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (taken[gi] || gts[gi].class_name != det.class_name) continue;
      double d = norm(det.center - gts[gi].center);
      if (d > center_threshold) continue;
      if (best < 0 || d < best_dist) {
        best_dist = d;
        best = static_cast<int>(gi);
      }
    }
    if (best >= 0) {
      taken[best] = 1;
      matches.emplace_back(di, best);
    }
  }
  return matches;
}

}  // namespace store3d
