#pragma once

#include <limits>

#include "store3d/dataset.hpp"

namespace store3d {

struct RelevanceConfig {
  double horizon_s = 5.0;
  double step_dt_s = 0.1;
  double d_min_m = 1.2;
  double percentile = 0.10;

  void validate() const;
};

struct RelevanceLabel {
  std::string agent_id;
  bool relevant = false;
  double closest_distance = std::numeric_limits<double>::infinity();  // d_C
  bool uncovered = false;
};

// Convex hull of the agent's box corners sampled over [t0, t0 + horizon].
// Throws InsufficientTrack when the track cannot cover the horizon.
ConvexPolygon swept_corridor(const AgentTrack& track, double t0,
                             const RelevanceConfig& cfg);

// d_C = distance between the two swept corridors; relevant iff d_C <= d_min.
RelevanceLabel relevance_label(const AgentTrack& agent, const AgentTrack& ego,
                               double t0, const RelevanceConfig& cfg);

struct FrameLabels {
  std::string scene_id;
  std::string frame_id;
  std::vector<RelevanceLabel> labels;  // ordered by agent_id
};

// Labels every (frame, agent) pair. Agents whose tracks end before the full
// horizon are labeled on the truncated horizon when at least 1 s remains,
// otherwise flagged uncovered with an infinite d_C.
std::vector<FrameLabels> label_dataset(const SceneDataset& dataset,
                                       const RelevanceConfig& cfg);

struct CalibrationResult {
  double d_min = 0.0;
  std::vector<std::pair<double, double>> cdf;  // (distance, cumulative fraction)
};

// Nearest-rank percentile of the closest-distance distribution over all
// covered (frame, agent) pairs. Throws EmptyDistribution when nothing is
// covered.
CalibrationResult calibrate_dmin(const SceneDataset& dataset,
                                 const RelevanceConfig& cfg);

}  // namespace store3d
