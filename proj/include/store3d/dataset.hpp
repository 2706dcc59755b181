#pragma once

#include <optional>
#include <string>
#include <vector>

#include "store3d/geometry.hpp"

namespace store3d {

struct TrackPoint {
  double timestamp = 0.0;  // seconds
  OrientedBoxBEV box;      // world frame
};

// Timestamped trajectory of one agent (the ego is a track like any other).
struct AgentTrack {
  std::string agent_id;
  std::string class_name;
  std::vector<TrackPoint> boxes;  // strictly increasing timestamps
  std::vector<std::pair<double, double>> velocity;  // per-keyframe (vx, vy), optional
  std::string attribute;  // "" when absent
  double z_center = 0.0;
  double height = 0.0;

  double first_time() const { return boxes.front().timestamp; }
  double last_time() const { return boxes.back().timestamp; }
  void validate() const;
};

// Linear center / shortest-arc yaw interpolation between keyframes.
// Throws InsufficientTrack when t is outside the covered interval.
OrientedBoxBEV track_box_at(const AgentTrack& track, double t);
std::pair<double, double> track_velocity_at(const AgentTrack& track, double t);
bool track_covers(const AgentTrack& track, double t0, double t1);

struct Frame {
  std::string frame_id;
  double timestamp = 0.0;
};

struct Scene {
  std::string scene_id;
  AgentTrack ego;
  std::vector<AgentTrack> agents;
  std::vector<Frame> frames;
};

struct DatasetMeta {
  std::vector<std::string> classes;
  double ego_length = 4.08;
  double ego_width = 1.73;
};

struct SceneDataset {
  DatasetMeta meta;
  std::vector<Scene> scenes;

  void validate() const;
};

// One ground-truth item as the metrics see it.
struct GtBox {
  std::string agent_id;
  std::string class_name;
  OrientedBoxBEV box;
  double z_center = 0.0;
  double height = 0.0;
  std::pair<double, double> velocity{0.0, 0.0};
  std::string attribute;
};

// Agents present (interpolable) at the frame, ordered by agent_id.
std::vector<GtBox> frame_ground_truth(const Scene& scene, const Frame& frame);

SE2Pose ego_pose_at(const Scene& scene, double t);

struct SyntheticSpec {
  int scenes = 4;
  int agents_per_scene = 12;
  double scene_duration_s = 20.0;
  double frame_hz = 2.0;
  double ego_speed_min = 3.0;
  double ego_speed_max = 9.0;
  double agent_speed_min = 0.0;
  double agent_speed_max = 12.0;
  double spawn_radius_m = 45.0;
  uint64_t seed = 1;
};

// Kinematic scenario generator: constant-velocity, constant-turn-rate and
// stop-and-go agents around a moving ego. Deterministic per seed.
SceneDataset gen_synthetic(const SyntheticSpec& spec);

}  // namespace store3d
