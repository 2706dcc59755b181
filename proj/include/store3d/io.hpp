#pragma once

#include <string>
#include <vector>

#include "store3d/config.hpp"
#include "store3d/metrics.hpp"
#include "store3d/profiler.hpp"

namespace store3d {

// Stamp embedded in every output file.
struct OutputStamp {
  std::string config_hash;
  std::string tool_version = kToolVersion;
};

void write_dataset(const std::string& path, const SceneDataset& ds,
                   const OutputStamp& stamp);
SceneDataset read_dataset(const std::string& path);

void write_labels_jsonl(const std::string& path,
                        const std::vector<FrameLabels>& labels,
                        const OutputStamp& stamp);
std::vector<FrameLabels> read_labels_jsonl(const std::string& path);

void write_detections_jsonl(const std::string& path,
                            const std::vector<Detection>& dets,
                            const OutputStamp& stamp);
std::vector<Detection> read_detections_jsonl(const std::string& path);

void write_cdf_csv(const std::string& path, const CalibrationResult& calib,
                   const OutputStamp& stamp);

void write_metrics_report(const std::string& path, const MetricsReport& report,
                          const OutputStamp& stamp);
void write_metrics_csv(const std::string& path, const MetricsReport& report,
                       const OutputStamp& stamp);

void write_flop_report(const std::string& path, const FlopReport& report,
                       const OutputStamp& stamp);

struct CurveRow {
  double keep_ratio = 1.0;
  double total_flops = 0.0;
  double flop_ratio = 1.0;
  double map = 0.0;
  double nds = 0.0;
  double nds_rm = 0.0;
};
void write_curve_csv(const std::string& path, const std::vector<CurveRow>& rows,
                     const OutputStamp& stamp);

// TKR sweep of the FLOP model for plot data.
struct FlopSweepRow {
  double tkr = 1.0;
  double total_flops = 0.0;
  double ratio = 1.0;
  double mkr = 1.0;
  double buffer_bytes = 0.0;
};
void write_flops_csv(const std::string& path,
                     const std::vector<FlopSweepRow>& rows,
                     const OutputStamp& stamp);

void write_traces_json(const std::string& path,
                       const std::vector<std::pair<std::string, SparsityTrace>>& traces,
                       const OutputStamp& stamp);

struct GradcheckRow {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
};
void write_gradcheck_json(const std::string& path,
                          const std::vector<GradcheckRow>& rows,
                          const OutputStamp& stamp);

void write_error_json(const std::string& code, const std::string& message);

}  // namespace store3d
