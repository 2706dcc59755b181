#pragma once

#include "store3d/config.hpp"
#include "store3d/io.hpp"
#include "store3d/metrics.hpp"
#include "store3d/sparsity.hpp"

namespace store3d {

// Scene-level split: the first ceil(fraction * n) scenes train, the rest
// evaluate. Deterministic.
std::pair<std::vector<int>, std::vector<int>> split_scenes(
    const SceneDataset& ds, double train_fraction);

// Everything head training needs from one frame, computed once against the
// frozen backbone/decoder.
struct FrameFeatures {
  std::string frame_id;
  Tensor2 head_inputs;       // Q x in_dim for the configured relevance kind
  Tensor2 final_embeddings;  // Q x D
  std::vector<std::array<double, 3>> ref_points;  // decode-time refs
  SetTargets targets;        // ego-frame gt encodings
  std::vector<GtBox> gts_ego;
  std::vector<char> gt_relevant;  // aligned to gts_ego; covered & relevant
  std::vector<Tensor2> finest_tokens;          // per view, (h0*w0) x D
  std::vector<std::vector<double>> aux_heat;   // per view
  std::vector<std::vector<std::array<double, 3>>> aux_pos;  // (cell, du, dv)
};

FrameFeatures precompute_frame(const Scene& scene, const Frame& frame,
                               const ModelParams& params, const ModelConfig& cfg,
                               const ScheduleConfig& schedule, RunMode mode,
                               const std::map<std::string, RelevanceLabel>& labels,
                               uint64_t seed);

struct RelevanceTrainResult {
  double final_loss = 0.0;
  double auc = 0.0;
  int eval_agents = 0;
  int iterations = 0;
};

// Plain gradient descent on the relevance head with the linear sparsity
// warmup applied to the supervised query subset.
RelevanceTrainResult train_relevance_head(ModelParams& params,
                                          const ModelConfig& cfg,
                                          const ScheduleConfig& schedule,
                                          const LossConfig& loss_cfg,
                                          const SceneDataset& ds,
                                          const std::vector<FrameLabels>& labels,
                                          const TrainConfig& tc);

struct DetectionTrainResult {
  double final_loss = 0.0;
  int iterations = 0;
};

// Trains the classification/box/aux heads against frozen features produced
// at the given schedule and routing mode.
DetectionTrainResult train_detection_heads(ModelParams& params,
                                           const ModelConfig& cfg,
                                           const ScheduleConfig& schedule,
                                           const LossConfig& loss_cfg,
                                           const SceneDataset& ds,
                                           const std::vector<FrameLabels>& labels,
                                           const TrainConfig& tc, RunMode mode);

double roc_auc(const std::vector<double>& scores, const std::vector<char>& labels);

// Held-out relevance AUC: per covered gt agent, the matched query's score
// against its corridor label.
RelevanceTrainResult eval_relevance_auc(const ModelParams& params,
                                        const ModelConfig& cfg,
                                        const ScheduleConfig& schedule,
                                        const SceneDataset& ds,
                                        const std::vector<FrameLabels>& labels,
                                        const std::vector<int>& scene_indices,
                                        uint64_t seed);

// Full joint loss (det + rel + aux) over one precomputed frame as a function
// of the trainable head parameters, with the analytic gradient in the packed
// order: relevance head, cls head, box head, aux head.
size_t packed_head_size(const ModelParams& params, RelevanceKind kind);
std::vector<double> pack_heads(const ModelParams& params, RelevanceKind kind);
void unpack_heads(std::span<const double> flat, RelevanceKind kind,
                  ModelParams* params);

double joint_loss_and_grad(const FrameFeatures& ff, const ModelParams& params,
                           const ModelConfig& cfg, const LossConfig& lcfg,
                           std::vector<double>* packed_grad,
                           LossBreakdown* breakdown = nullptr);

// Temporal simulation over scenes with query propagation; detections in
// world frame, one trace per frame.
struct SimulateOutput {
  std::vector<Detection> detections;
  std::vector<std::pair<std::string, SparsityTrace>> traces;
};

SimulateOutput simulate(const SceneDataset& ds,
                        const std::vector<int>& scene_indices,
                        const ModelParams& params, const ModelConfig& cfg,
                        const ScheduleConfig& schedule, RunMode mode,
                        uint64_t seed);

GtBox gt_to_ego(const GtBox& gt, const SE2Pose& ego_pose);

// The full finite-difference suite behind the gradcheck command.
std::vector<GradcheckRow> run_gradient_suite(const RunConfig& cfg);

}  // namespace store3d
