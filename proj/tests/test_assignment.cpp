#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "store3d/assignment.hpp"
#include "store3d/rng.hpp"

using namespace store3d;

namespace {

// Exhaustive permutation oracle for square matrices.
double brute_force_cost(const CostMatrix& c) {
  std::vector<int> perm(c.cols);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (int r = 0; r < c.rows; ++r) cost += c.at(r, perm[r]);
    best = std::min(best, cost);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Oracle for rectangular matrices: enumerate injections of the smaller side.
double brute_force_rect(const CostMatrix& c) {
  if (c.rows <= c.cols) {
    std::vector<int> cols(c.cols);
    std::iota(cols.begin(), cols.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> pick(c.rows);
    // Enumerate all ordered selections via permutations of column subets.
    std::vector<int> perm = cols;
    do {
      double cost = 0.0;
      for (int r = 0; r < c.rows; ++r) cost += c.at(r, perm[r]);
      best = std::min(best, cost);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
  }
  CostMatrix t{c.cols, c.rows, {}};
  t.costs.resize(c.costs.size());
  for (int r = 0; r < c.rows; ++r)
    for (int col = 0; col < c.cols; ++col)
      t.costs[static_cast<size_t>(col) * c.rows + r] = c.at(r, col);
  return brute_force_rect(t);
}

CostMatrix random_matrix(Rng& rng, int rows, int cols, double lo = -10, double hi = 10) {
  CostMatrix c{rows, cols, {}};
  c.costs.reserve(static_cast<size_t>(rows) * cols);
  for (int i = 0; i < rows * cols; ++i) c.costs.push_back(rng.uniform(lo, hi));
  return c;
}

}  // namespace

TEST_CASE("hungarian anti-diagonal zeros") {
  CostMatrix c{2, 2, {1, 0, 0, 1}};
  auto a = hungarian(c);
  CHECK(a.total_cost == 0.0);
  REQUIRE(a.pairs.size() == 2);
  CHECK(a.pairs[0] == std::pair<int, int>{0, 1});
  CHECK(a.pairs[1] == std::pair<int, int>{1, 0});
}

TEST_CASE("hungarian identity-cost matrix") {
  CostMatrix c{3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}};
  CHECK(hungarian(c).total_cost == 0.0);
}

TEST_CASE("hungarian rejects non-finite costs") {
  CostMatrix c{2, 2, {1, std::numeric_limits<double>::quiet_NaN(), 0, 1}};
  CHECK_THROWS_AS(hungarian(c), NonFiniteCost);
  CostMatrix c2{1, 2, {1, std::numeric_limits<double>::infinity()}};
  CHECK_THROWS_AS(hungarian(c2), NonFiniteCost);
}

TEST_CASE("hungarian matches brute force on random 7x7") {
  Rng rng(42);
  for (int seed = 0; seed < 100; ++seed) {
    auto c = random_matrix(rng, 7, 7);
    auto a = hungarian(c);
    CHECK(a.total_cost == brute_force_cost(c));
    REQUIRE(a.pairs.size() == 7);
  }
}

TEST_CASE("hungarian rectangular matches injection oracle") {
  Rng rng(99);
  for (int rep = 0; rep < 50; ++rep) {
    int rows = rng.uniform_int(1, 5);
    int cols = rng.uniform_int(1, 5);
    auto c = random_matrix(rng, rows, cols);
    auto a = hungarian(c);
    CHECK(a.total_cost == doctest::Approx(brute_force_rect(c)).epsilon(1e-12));
    CHECK(static_cast<int>(a.pairs.size()) == std::min(rows, cols));
    std::vector<char> rs(rows, 0), cs(cols, 0);
    for (auto [r, col] : a.pairs) {
      CHECK(!rs[r]);
      CHECK(!cs[col]);
      rs[r] = cs[col] = 1;
    }
  }
}

TEST_CASE("hungarian permutation equivariance") {
  Rng rng(7);
  auto c = random_matrix(rng, 6, 6);
  auto base = hungarian(c);

  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937(123));
  CostMatrix pc{6, 6, std::vector<double>(36)};
  for (int r = 0; r < 6; ++r)
    for (int col = 0; col < 6; ++col) pc.costs[static_cast<size_t>(r) * 6 + col] = c.at(perm[r], col);
  auto permuted = hungarian(pc);
  CHECK(permuted.total_cost == doctest::Approx(base.total_cost).epsilon(1e-12));

  std::vector<int> base_col_of_row(6), perm_col_of_row(6);
  for (auto [r, col] : base.pairs) base_col_of_row[r] = col;
  for (auto [r, col] : permuted.pairs) perm_col_of_row[r] = col;
  for (int r = 0; r < 6; ++r) CHECK(perm_col_of_row[r] == base_col_of_row[perm[r]]);
}

TEST_CASE("row constant shift moves cost by the constant") {
  Rng rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    CostMatrix c = random_matrix(rng, 5, 5);
    for (double& v : c.costs) v = std::round(v);  // integer costs keep FP exact
    auto base = hungarian(c);
    CostMatrix shifted = c;
    double k = std::round(rng.uniform(-5, 5));
    int row = rng.uniform_int(0, 4);
    for (int col = 0; col < 5; ++col) shifted.costs[static_cast<size_t>(row) * 5 + col] += k;
    auto after = hungarian(shifted);
    CHECK(after.total_cost == base.total_cost + k);
    CHECK(after.pairs == base.pairs);
  }
}

TEST_CASE("hungarian beats greedy on square matrices") {
  Rng rng(31);
  for (int rep = 0; rep < 30; ++rep) {
    auto c = random_matrix(rng, 6, 6, 0, 10);
    auto a = hungarian(c);
    // Row-by-row greedy assignment.
    std::vector<char> used(6, 0);
    double greedy = 0.0;
    for (int r = 0; r < 6; ++r) {
      int best = -1;
      for (int col = 0; col < 6; ++col) {
        if (used[col]) continue;
        if (best < 0 || c.at(r, col) < c.at(r, best)) best = col;
      }
      used[best] = 1;
      greedy += c.at(r, best);
    }
    CHECK(a.total_cost <= greedy + 1e-12);
  }
}

TEST_CASE("greedy_match basic cases") {
  std::vector<ScoredPoint> dets{{{0.3, 0.0}, 0.9, "car"}};
  std::vector<GtPoint> gts{{{0.0, 0.0}, "car"}};
  CHECK(greedy_match(dets, gts, 0.5).size() == 1);
  CHECK(greedy_match({{{3.0, 0.0}, 0.9, "car"}}, gts, 2.0).empty());

  // Two detections near one gt: the higher-scored one wins.
  std::vector<ScoredPoint> two{{{0.3, 0}, 0.5, "car"}, {{0.2, 0}, 0.8, "car"}};
  auto m = greedy_match(two, gts, 1.0);
  REQUIRE(m.size() == 1);
  CHECK(m[0].first == 1);

  // Class mismatch prevents matching.
  CHECK(greedy_match({{{0.1, 0}, 0.9, "pedestrian"}}, gts, 1.0).empty());
}

TEST_CASE("greedy_match order independent for distinct scores") {
  Rng rng(17);
  std::vector<ScoredPoint> dets;
  std::vector<GtPoint> gts;
  for (int i = 0; i < 12; ++i) {
    gts.push_back({{rng.uniform(-10, 10), rng.uniform(-10, 10)}, "car"});
    dets.push_back({{rng.uniform(-10, 10), rng.uniform(-10, 10)},
                    (i + 1) * 0.07, "car"});
  }
  auto base = greedy_match(dets, gts, 5.0);
  std::vector<std::pair<Point2, Point2>> base_geo;
  for (auto [d, g] : base) base_geo.push_back({dets[d].center, gts[g].center});

  std::vector<int> perm(dets.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937(5));
  std::vector<ScoredPoint> shuffled;
  for (int i : perm) shuffled.push_back(dets[i]);
  auto again = greedy_match(shuffled, gts, 5.0);
  REQUIRE(again.size() == base.size());
  for (size_t i = 0; i < again.size(); ++i) {
    auto [d, g] = again[i];
    CHECK(shuffled[d].center.x == base_geo[i].first.x);
    CHECK(gts[g].center.x == base_geo[i].second.x);
  }
}
