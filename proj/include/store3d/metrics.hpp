#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "store3d/corridor.hpp"
#include "store3d/dataset.hpp"

namespace store3d {

struct Detection {
  std::string frame_id;
  std::string class_name;
  OrientedBoxBEV box;  // world frame
  double z_center = 0.0;
  double height = 1.0;
  std::pair<double, double> velocity{0.0, 0.0};
  std::string attribute;
  double score = 0.0;
};

struct MetricsConfig {
  std::vector<double> center_thresholds{0.5, 1.0, 2.0, 4.0};
  double ra_radius = 30.0;
  double min_recall = 0.1;
  double min_precision = 0.1;
  double tp_error_threshold = 2.0;
  std::vector<std::string> classes{"car", "truck", "pedestrian"};
  bool include_velocity = true;
  bool include_attribute = true;

  void validate() const;
};

// Per-frame evaluation inputs, already in world frame.
struct FrameEvalData {
  std::string frame_id;
  Point2 ego_center;
  std::vector<GtBox> gts;
  std::vector<Detection> dets;
  std::map<std::string, RelevanceLabel> labels;  // by agent id (RM variant)
};

struct TpErrors {
  double ate = 1.0;
  double ase = 1.0;
  double aoe = 1.0;
  double ave = 1.0;
  double aae = 1.0;
};

struct ClassResult {
  std::map<double, double> ap_by_threshold;
  TpErrors errors;
  int tp = 0;
  int fp = 0;
  int gt = 0;
};

struct VariantResult {
  std::map<std::string, ClassResult> per_class;  // only classes with gt
  double mean_ap = 0.0;
  TpErrors mean_errors;
  double nds = 0.0;
  long tp = 0, fp = 0, gt = 0;
};

struct MetricsReport {
  VariantResult standard;
  VariantResult ra;
  VariantResult rm;
  // Table-style summary; mAP of the RM variant stays internal.
  double map = 0.0;
  double map_ra = 0.0;
  double nds = 0.0;
  double nds_ra = 0.0;
  double nds_rm = 0.0;
  std::map<std::string, std::string> metadata;
};

// nuScenes-style AP for one class at one center threshold: global
// score-descending greedy matching, 101-point interpolated precision,
// recall/precision floors at min_recall/min_precision.
double average_precision(const std::vector<FrameEvalData>& frames,
                         const std::string& class_name, double threshold,
                         const MetricsConfig& cfg);

// Matched TP pair for error computation.
struct MatchedPair {
  const Detection* det;
  const GtBox* gt;
};

// ATE / ASE / AOE / AVE / AAE over matched pairs; all default to 1.0 when
// the match set is empty.
TpErrors tp_errors(const std::vector<MatchedPair>& matches);

// NDS composite; `included` masks the five error terms (renormalizing the
// 10-point split when velocity/attribute are unavailable).
double nds(double mean_ap, const TpErrors& errors,
           const std::array<bool, 5>& included = {true, true, true, true, true});

// Keeps items whose BEV center lies within ra_radius of the ego center.
void apply_ra_filter(FrameEvalData& frame, double ra_radius);

// Restricts gt to relevant agents; detections greedy-matched (at
// max_threshold) to an irrelevant gt are removed entirely. MissingLabels if
// a gt agent has no label.
void apply_rm_filter(FrameEvalData& frame, double max_threshold);

MetricsReport evaluate(const std::vector<FrameEvalData>& frames,
                       const MetricsConfig& cfg);

// Assembles evaluation inputs from a dataset + labels + detections.
std::vector<FrameEvalData> build_eval_frames(
    const SceneDataset& dataset, const std::vector<FrameLabels>& labels,
    const std::vector<Detection>& detections);

}  // namespace store3d
