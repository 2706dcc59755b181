#include "store3d/corridor.hpp"

#include <algorithm>
#include <cmath>

#include "store3d/parallel.hpp"

namespace store3d {

void RelevanceConfig::validate() const {
  if (!(horizon_s > 0)) throw ConfigError("horizon_s must be positive");
  if (!(step_dt_s > 0) || step_dt_s > horizon_s) {
    throw ConfigError("step_dt_s must lie in (0, horizon_s]");
  }
  if (d_min_m < 0) throw ConfigError("d_min_m must be non-negative");
  if (!(percentile > 0) || percentile > 1.0) {
    throw ConfigError("percentile must lie in (0, 1]");
  }
}

namespace {

// Sampled times {t0, t0+dt, ..., t0+h}; the endpoint is always included.
std::vector<double> sample_times(double t0, double horizon, double dt) {
  std::vector<double> ts;
  int n = static_cast<int>(std::ceil(horizon / dt - 1e-9));
  ts.reserve(n + 1);
  for (int k = 0; k < n; ++k) ts.push_back(t0 + k * dt);
  ts.push_back(t0 + horizon);
  return ts;
}

ConvexPolygon corridor_over(const AgentTrack& track, double t0, double horizon,
                            double dt) {
  if (!track_covers(track, t0, t0 + horizon)) {
    throw InsufficientTrack("track '" + track.agent_id + "' does not cover [t0, t0+H]");
  }
  std::vector<Point2> corners;
  for (double t : sample_times(t0, horizon, dt)) {
    auto c = box_corners(track_box_at(track, t));
    corners.insert(corners.end(), c.begin(), c.end());
  }
  return convex_hull(std::move(corners));
}

// Usable horizon for a (frame, agent, ego) triple: full horizon if covered,
// a truncated one when >= 1 s of joint coverage remains, nothing otherwise.
constexpr double kMinTruncatedHorizon = 1.0;

std::optional<double> usable_horizon(const AgentTrack& agent, const AgentTrack& ego,
                                     double t0, double horizon) {
  constexpr double kTol = 1e-9;
  if (agent.first_time() > t0 + kTol || ego.first_time() > t0 + kTol) return std::nullopt;
  double avail = std::min(agent.last_time(), ego.last_time()) - t0;
  if (avail >= horizon - kTol) return horizon;
  if (avail >= kMinTruncatedHorizon - kTol) return avail;
  return std::nullopt;
}

RelevanceLabel label_pair(const AgentTrack& agent, const AgentTrack& ego,
                          double t0, double horizon, const RelevanceConfig& cfg) {
  RelevanceLabel label;
  label.agent_id = agent.agent_id;
  auto agent_corr = corridor_over(agent, t0, horizon, cfg.step_dt_s);
  auto ego_corr = corridor_over(ego, t0, horizon, cfg.step_dt_s);
  label.closest_distance = polygon_distance(agent_corr, ego_corr);
  label.relevant = label.closest_distance <= cfg.d_min_m;
  return label;
}

}  // namespace

ConvexPolygon swept_corridor(const AgentTrack& track, double t0,
                             const RelevanceConfig& cfg) {
  return corridor_over(track, t0, cfg.horizon_s, cfg.step_dt_s);
}

RelevanceLabel relevance_label(const AgentTrack& agent, const AgentTrack& ego,
                               double t0, const RelevanceConfig& cfg) {
  return label_pair(agent, ego, t0, cfg.horizon_s, cfg);
}

std::vector<FrameLabels> label_dataset(const SceneDataset& dataset,
                                       const RelevanceConfig& cfg) {
  cfg.validate();
  struct Job {
    const Scene* scene;
    const Frame* frame;
  };
  std::vector<Job> jobs;
  for (const auto& scene : dataset.scenes) {
    for (const auto& frame : scene.frames) jobs.push_back({&scene, &frame});
  }

  std::vector<FrameLabels> out(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), [&](int j) {
    const Scene& scene = *jobs[j].scene;
    const Frame& frame = *jobs[j].frame;
    FrameLabels fl;
    fl.scene_id = scene.scene_id;
    fl.frame_id = frame.frame_id;
    for (const auto& agent : scene.agents) {
      if (!track_covers(agent, frame.timestamp, frame.timestamp)) continue;
      auto horizon = usable_horizon(agent, scene.ego, frame.timestamp, cfg.horizon_s);
      if (!horizon) {
        RelevanceLabel label;
        label.agent_id = agent.agent_id;
        label.uncovered = true;
        fl.labels.push_back(std::move(label));
      } else {
        fl.labels.push_back(label_pair(agent, scene.ego, frame.timestamp, *horizon, cfg));
      }
    }
    std::sort(fl.labels.begin(), fl.labels.end(),
              [](const RelevanceLabel& a, const RelevanceLabel& b) {
                return a.agent_id < b.agent_id;
              });
    out[j] = std::move(fl);
  });
  return out;
}

CalibrationResult calibrate_dmin(const SceneDataset& dataset,
                                 const RelevanceConfig& cfg) {
  auto labels = label_dataset(dataset, cfg);
  std::vector<double> distances;
  for (const auto& fl : labels) {
    for (const auto& label : fl.labels) {
      if (!label.uncovered) distances.push_back(label.closest_distance);
    }
  }
  if (distances.empty()) throw EmptyDistribution("no covered (frame, agent) pair");
  std::sort(distances.begin(), distances.end());

  size_t n = distances.size();
  size_t rank = static_cast<size_t>(std::ceil(cfg.percentile * n - 1e-9));  // 1-based
  rank = std::clamp<size_t>(rank, 1, n);

  CalibrationResult result;
  result.d_min = distances[rank - 1];
  result.cdf.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    result.cdf.emplace_back(distances[i], static_cast<double>(i + 1) / n);
  }
  return result;
}

}  // namespace store3d
