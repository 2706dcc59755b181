#include "store3d/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "store3d/rng.hpp"

namespace store3d {

void AgentTrack::validate() const {
  if (boxes.empty()) throw DegenerateInput("track '" + agent_id + "' has no boxes");
  for (size_t i = 1; i < boxes.size(); ++i) {
    if (!(boxes[i].timestamp > boxes[i - 1].timestamp)) {
      throw DegenerateInput("track '" + agent_id + "' timestamps not increasing");
    }
  }
  if (!velocity.empty() && velocity.size() != boxes.size()) {
    throw DegenerateInput("track '" + agent_id + "' velocity/box count mismatch");
  }
}

bool track_covers(const AgentTrack& track, double t0, double t1) {
  constexpr double kTol = 1e-9;
  return track.first_time() <= t0 + kTol && track.last_time() >= t1 - kTol;
}

namespace {

// Keyframe pair bracketing t; exact hits return equal indices.
std::pair<size_t, size_t> bracket(const AgentTrack& track, double t) {
  constexpr double kTol = 1e-9;
  if (t < track.first_time() - kTol || t > track.last_time() + kTol) {
    throw InsufficientTrack("t outside track '" + track.agent_id + "'");
  }
  t = std::clamp(t, track.first_time(), track.last_time());
  auto it = std::lower_bound(track.boxes.begin(), track.boxes.end(), t,
                             [](const TrackPoint& p, double v) { return p.timestamp < v; });
  size_t hi = static_cast<size_t>(it - track.boxes.begin());
  if (hi == 0) return {0, 0};
  if (std::abs(track.boxes[hi].timestamp - t) <= kTol) return {hi, hi};
  return {hi - 1, hi};
}

}  // namespace

OrientedBoxBEV track_box_at(const AgentTrack& track, double t) {
  auto [lo, hi] = bracket(track, t);
  const TrackPoint& a = track.boxes[lo];
  if (lo == hi) return a.box;
  const TrackPoint& b = track.boxes[hi];
  double f = (t - a.timestamp) / (b.timestamp - a.timestamp);
  Point2 center = a.box.center + f * (b.box.center - a.box.center);
  double yaw = a.box.yaw + f * wrap_angle(b.box.yaw - a.box.yaw);
  double length = a.box.length + f * (b.box.length - a.box.length);
  double width = a.box.width + f * (b.box.width - a.box.width);
  return OrientedBoxBEV(center, yaw, length, width);
}

std::pair<double, double> track_velocity_at(const AgentTrack& track, double t) {
  if (track.velocity.empty()) return {0.0, 0.0};
  auto [lo, hi] = bracket(track, t);
  if (lo == hi) return track.velocity[lo];
  double f = (t - track.boxes[lo].timestamp) /
             (track.boxes[hi].timestamp - track.boxes[lo].timestamp);
  return {track.velocity[lo].first + f * (track.velocity[hi].first - track.velocity[lo].first),
          track.velocity[lo].second + f * (track.velocity[hi].second - track.velocity[lo].second)};
}

void SceneDataset::validate() const {
  for (const auto& scene : scenes) {
    scene.ego.validate();
    std::set<std::string> ids;
    for (const auto& agent : scene.agents) {
      agent.validate();
      if (!ids.insert(agent.agent_id).second) {
        throw DegenerateInput("duplicate agent id '" + agent.agent_id + "' in scene " +
                              scene.scene_id);
      }
    }
    for (size_t i = 1; i < scene.frames.size(); ++i) {
      if (!(scene.frames[i].timestamp > scene.frames[i - 1].timestamp)) {
        throw DegenerateInput("frame timestamps not increasing in scene " + scene.scene_id);
      }
    }
  }
}

std::vector<GtBox> frame_ground_truth(const Scene& scene, const Frame& frame) {
  std::vector<GtBox> out;
  for (const auto& agent : scene.agents) {
    if (!track_covers(agent, frame.timestamp, frame.timestamp)) continue;
    GtBox gt;
    gt.agent_id = agent.agent_id;
    gt.class_name = agent.class_name;
    gt.box = track_box_at(agent, frame.timestamp);
    gt.z_center = agent.z_center;
    gt.height = agent.height;
    gt.velocity = track_velocity_at(agent, frame.timestamp);
    gt.attribute = agent.attribute;
    out.push_back(std::move(gt));
  }
  std::sort(out.begin(), out.end(),
            [](const GtBox& a, const GtBox& b) { return a.agent_id < b.agent_id; });
  return out;
}

SE2Pose ego_pose_at(const Scene& scene, double t) {
  OrientedBoxBEV box = track_box_at(scene.ego, t);
  return SE2Pose(box.center, box.yaw);
}

namespace {

struct ClassSpec {
  const char* name;
  double length, width, height;
};

constexpr ClassSpec kClasses[] = {
    {"car", 4.5, 1.9, 1.6},
    {"truck", 7.5, 2.6, 2.9},
    {"pedestrian", 0.8, 0.7, 1.75},
};

// Integrates a unicycle track and emits keyframes at the annotation rate.
AgentTrack integrate_track(const std::string& id, const ClassSpec& cls,
                           Point2 start, double heading, double speed,
                           double turn_rate, bool stop_and_go, double duration,
                           double dt_keyframe, Rng& rng) {
  AgentTrack track;
  track.agent_id = id;
  track.class_name = cls.name;
  track.z_center = cls.height / 2.0;
  track.height = cls.height;
  track.attribute = speed < 0.1 ? "stopped" : "moving";

  double stop_phase = rng.uniform(0, 8.0);
  const double sim_dt = 0.05;
  double x = start.x, y = start.y, h = heading;
  double t = 0.0;
  double next_key = 0.0;
  while (t <= duration + 1e-9) {
    if (t >= next_key - 1e-9) {
      double v = speed;
      if (stop_and_go) {
        double phase = std::fmod(t + stop_phase, 8.0);
        v = phase < 4.0 ? speed : 0.0;
      }
      track.boxes.push_back({next_key, OrientedBoxBEV({x, y}, h, cls.length, cls.width)});
      track.velocity.push_back({v * std::cos(h), v * std::sin(h)});
      next_key += dt_keyframe;
    }
    double v = speed;
    if (stop_and_go) {
      double phase = std::fmod(t + stop_phase, 8.0);
      v = phase < 4.0 ? speed : 0.0;
    }
    x += v * std::cos(h) * sim_dt;
    y += v * std::sin(h) * sim_dt;
    h = wrap_angle(h + turn_rate * sim_dt);
    t += sim_dt;
  }
  return track;
}

}  // namespace

SceneDataset gen_synthetic(const SyntheticSpec& spec) {
  SceneDataset ds;
  ds.meta.classes = {"car", "truck", "pedestrian"};
  Rng master(mix64(spec.seed, 0x5ce9e5));

  double frame_dt = 1.0 / spec.frame_hz;
  for (int s = 0; s < spec.scenes; ++s) {
    Rng rng = master.fork(s);
    Scene scene;
    scene.scene_id = "scene_" + std::to_string(s);

    double ego_speed = rng.uniform(spec.ego_speed_min, spec.ego_speed_max);
    double ego_turn = rng.uniform() < 0.5 ? 0.0 : rng.uniform(-0.06, 0.06);
    ClassSpec ego_cls{"ego", ds.meta.ego_length, ds.meta.ego_width, 1.5};
    scene.ego = integrate_track("ego", ego_cls, {0, 0}, rng.uniform(-kPi, kPi),
                                ego_speed, ego_turn, false, spec.scene_duration_s,
                                0.5, rng);
    scene.ego.class_name = "ego";

    Point2 ego_start = scene.ego.boxes.front().box.center;
    for (int a = 0; a < spec.agents_per_scene; ++a) {
      const ClassSpec& cls = kClasses[rng.uniform_int(0, 2)];
      double r = rng.uniform(4.0, spec.spawn_radius_m);
      double ang = rng.uniform(-kPi, kPi);
      Point2 start = ego_start + Point2{r * std::cos(ang), r * std::sin(ang)};
      double speed = rng.uniform(spec.agent_speed_min, spec.agent_speed_max);
      if (std::string(cls.name) == "pedestrian") speed = std::min(speed, 2.0);
      int motion = rng.uniform_int(0, 2);  // 0 cv, 1 turn, 2 stop-and-go
      double turn = motion == 1 ? rng.uniform(-0.3, 0.3) : 0.0;
      if (motion == 2 && speed < 0.5) speed = 1.0;
      auto track = integrate_track("agent_" + std::to_string(a), cls, start,
                                   rng.uniform(-kPi, kPi), motion == 2 ? speed : speed,
                                   turn, motion == 2, spec.scene_duration_s, 0.5, rng);
      scene.agents.push_back(std::move(track));
    }

    int frame_count = static_cast<int>(spec.scene_duration_s / frame_dt) + 1;
    for (int f = 0; f < frame_count; ++f) {
      scene.frames.push_back({scene.scene_id + "_frame_" + std::to_string(f),
                              f * frame_dt});
    }
    ds.scenes.push_back(std::move(scene));
  }
  ds.validate();
  return ds;
}

}  // namespace store3d
