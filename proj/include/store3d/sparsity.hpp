#pragma once

#include <array>
#include <optional>
#include <string>

#include "store3d/dataset.hpp"
#include "store3d/losses.hpp"
#include "store3d/nn.hpp"

namespace store3d {

// ---------------------------------------------------------------------------
// Streams and buffers

struct TokenCoord {
  int view = 0;
  int row = 0;
  int col = 0;
};

struct TokenStream {
  Tensor2 embeddings;               // N x D
  std::vector<int> original_index;  // row -> original token id
};

struct QuerySet {
  Tensor2 embeddings;  // Q x D
  std::vector<std::array<double, 3>> reference_points;
  std::vector<int> original_index;
  std::vector<char> propagated;  // origin flag per row
};

struct BufferEntry {
  int original_index = 0;
  std::vector<double> embedding;
  int stage_written = 0;
  std::array<double, 3> reference_point{};  // query buffers only
  char propagated = 0;
};

enum class BufferKind { image, query };

struct StorageBuffer {
  BufferKind kind = BufferKind::image;
  std::vector<BufferEntry> entries;
};

// ---------------------------------------------------------------------------
// Schedules

// Quadratic depth schedule: LKR_l = TKR + (1 - TKR) * (1 - l/L)^2.
double layer_keep_ratio(double tkr, int layer, int total_layers);

// Training warmup: 1 before start, linear from 1 to TKR across
// [start, end], TKR afterwards.
double training_keep_ratio(int iter, int warmup_start, int warmup_end,
                           double tkr);

struct ScheduleConfig {
  double tkr = 1.0;
  int backbone_layers = 6;
  std::vector<int> token_prune_layers;  // 1-based, ascending, < reactivation
  int token_reactivation_layer = 6;
  int decoder_layers = 3;
  std::vector<int> query_prune_layers;
  int query_reactivation_layer = 3;
  int warmup_start = 0;
  int warmup_end = 0;
  std::optional<double> rho_img_override;  // flat per-stream replacements
  std::optional<double> rho_qry_override;

  void validate() const;
  // Keep ratios with the reactivation-layer override to 1.0 applied.
  double token_ratio_at(int layer, double effective_tkr) const;
  double query_ratio_at(int layer, double effective_tkr) const;
};

struct RelevanceScores {
  std::vector<double> scores;  // aligned to stream rows, in [0,1]
  RelevanceKind kind = RelevanceKind::plan;
};

// ---------------------------------------------------------------------------
// Routing primitives

// Keeps the top keep_count rows by score (mode per cfg) and appends the
// complement to the buffer. Active rows stay in ascending original order.
void select_and_store(TokenStream& stream, std::span<const double> scores,
                      int keep_count, const GumbelTopkConfig& cfg,
                      StorageBuffer& buffer, int stage);
void select_and_store(QuerySet& stream, std::span<const double> scores,
                      int keep_count, const GumbelTopkConfig& cfg,
                      StorageBuffer& buffer, int stage);

// Merges buffered rows back (with their stored stage-l features), re-sorted
// by original index; empties the buffer. IndexCollision on duplicates.
void reactivate(TokenStream& stream, StorageBuffer& buffer);
void reactivate(QuerySet& stream, StorageBuffer& buffer);

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  int views = 2;
  int grid_h = 16;
  int grid_w = 16;
  int embed_dim = 32;
  int heads = 4;
  int window = 4;
  std::string backbone_layout = "wgwgwg";  // 'w'/'g' per layer
  int decoder_layers = 3;
  int num_anchor_queries = 36;
  int num_propagated = 8;
  int deform_points = 4;
  int fpn_levels = 2;
  int input_channels = 8;
  int head_hidden = 32;
  int ego_embed_dim = 8;
  int pe_freqs = 32;
  double relevance_topk_frac = 0.1;
  double bev_range = 40.0;
  double min_det_score = 0.05;
  RelevanceKind relevance_kind = RelevanceKind::plan;
  std::vector<std::string> classes{"car", "truck", "pedestrian"};

  int tokens_per_view() const { return grid_h * grid_w; }
  int total_tokens() const { return views * grid_h * grid_w; }
  int total_queries() const { return num_anchor_queries + num_propagated; }
  void validate() const;
};

struct DecoderLayerParams {
  TransformerBlockParams attn_mlp;
  DeformableParams deform;
};

struct ModelParams {
  Tensor2 patch_embed;  // D x C_in
  std::vector<double> patch_bias;
  std::vector<TransformerBlockParams> backbone;
  std::vector<DecoderLayerParams> decoder;
  MlpParams init_mlp;        // PE -> D
  MlpParams rel_head_plan;   // phi + u on [q || c || e]
  MlpParams rel_head_det;    // phi + u on [q || c]
  MlpParams ego_mlp;         // (speed, yaw rate, accel) -> ego_embed_dim
  DeformableParams rel_deform;
  Tensor2 cls_head;          // C x D
  std::vector<double> cls_bias;
  Tensor2 box_head;          // 10 x D
  std::vector<double> box_bias;
  Tensor2 aux_head;          // 3 x D (objectness logit, du, dv)
  std::vector<double> aux_bias;

  static ModelParams init(const ModelConfig& cfg, uint64_t seed);
};

// ---------------------------------------------------------------------------
// Query construction and temporal hand-off

std::vector<std::array<double, 3>> make_anchor_points(const ModelConfig& cfg);
std::vector<std::array<double, 3>> make_reserve_points(const ModelConfig& cfg);

QuerySet init_queries(const std::vector<std::array<double, 3>>& anchors,
                      const MlpParams& init_mlp, int pe_freqs);

// Transforms the previous frame's kept queries into the current ego frame.
// z is unchanged; embeddings are carried; origin flips to propagated.
QuerySet propagate_queries(const QuerySet& prev_topk, const SE2Pose& ego_motion);

QuerySet concat_queries(const QuerySet& a, const QuerySet& b);

// ---------------------------------------------------------------------------
// Relevance prediction

// Fixed synthetic surround projection: azimuth picks the view, azimuth
// fraction maps to u, range/bev_range maps to v.
struct ViewPoint {
  int view = 0;
  double u = 0.0;  // [0,1]
  double v = 0.0;
};
ViewPoint project_to_view(Point2 ego_xy, int views, double bev_range);

struct ViewPyramid {
  // Owned level maps, finest first: level k is a 2^k-strided average pool.
  std::vector<Tensor2> levels;
  std::vector<std::pair<int, int>> dims;  // (h, w) per level
};

ViewPyramid build_pyramid(const Tensor2& view_tokens, int grid_h, int grid_w,
                          int levels);

struct QueryRelevanceResult {
  RelevanceScores scores;
  Tensor2 footprints;             // Q x (views * h0 * w0), rows sum to 1
  std::vector<int> query_view;    // view index per query
};

// r_j = sigmoid(u . phi([q_j || c_j (|| e_t)])) with c_j sampled by the
// shared deformable module at the projected reference point (Eq. 3-4 path).
QueryRelevanceResult query_relevance(const QuerySet& queries,
                                     const std::vector<ViewPyramid>& pyramids,
                                     const MlpParams& head,
                                     const DeformableParams& deform,
                                     std::span<const double> ego_embedding,
                                     RelevanceKind kind, const ModelConfig& cfg);

// The raw head input rows [q || c (|| e)]; the relevance head path treats
// these as constants (stop-gradient at embeddings).
Tensor2 relevance_head_inputs(const QuerySet& queries,
                              const std::vector<ViewPyramid>& pyramids,
                              const DeformableParams& deform,
                              std::span<const double> ego_embedding,
                              RelevanceKind kind, const ModelConfig& cfg);

// r_img_i = (1/K) sum over top-K query footprints (Eq. 5). EmptyTopK if the
// footprint set is empty.
std::vector<double> token_relevance(const Tensor2& topk_footprints);

// ---------------------------------------------------------------------------
// Pipeline

enum class RunMode { dense, sparse_eval, sparse_train };

struct StageRecord {
  std::string stage;
  BufferKind kind = BufferKind::image;
  int layer = 0;
  int active_before = 0;
  int kept = 0;
  int buffer_size = 0;
  double ratio = 1.0;
  bool partition_ok = true;
};

struct SparsityTrace {
  std::vector<StageRecord> stages;
  int initial_tokens = 0;
  int final_tokens = 0;
  int initial_queries = 0;
  int final_queries = 0;
  uint64_t total_token_rows = 0;  // sum of active tokens over backbone layers
};

struct FrameInput {
  std::vector<Tensor2> view_features;  // per view, (h*w) x C_in
  QuerySet queries;
  std::array<double, 3> ego_kinematics{};  // speed, yaw rate, accel
};

struct PipelineDetection {
  std::string class_name;
  double score = 0.0;
  double x = 0, y = 0, z = 0;
  double length = 1, width = 1, height = 1;
  double yaw = 0;
  double vx = 0, vy = 0;
};

struct PipelineResult {
  std::vector<PipelineDetection> detections;  // ego frame
  RelevanceScores final_query_relevance;
  SparsityTrace trace;
  Tensor2 final_query_embeddings;  // Q0 x D, original query order
  Tensor2 final_class_probs;       // Q0 x C
  Tensor2 final_box_params;        // Q0 x 10
  std::vector<std::array<double, 3>> final_ref_points;  // decode-time refs
  QuerySet final_queries;          // ref points updated to predicted centers
  std::vector<double> final_scores;  // max class prob per query
  ViewPyramid finest_tokens;         // per-view pyramids flattened for aux use
  std::vector<ViewPyramid> pyramids;
};

PipelineResult run_pipeline(const FrameInput& input, const ModelParams& params,
                            const ModelConfig& cfg, const ScheduleConfig& schedule,
                            RunMode mode, uint64_t routing_seed,
                            int train_iter = -1);

// Single decoder layer (self-attention block + deformable context add);
// exposed for the FLOP-model cross-check.
Tensor2 decoder_layer_forward(const Tensor2& queries,
                              const std::vector<std::array<double, 3>>& ref_points,
                              const std::vector<ViewPyramid>& pyramids,
                              const DecoderLayerParams& layer,
                              const ModelConfig& cfg);

// Rendering of synthetic views from scene state (occupancy + kinematics
// descriptors splatted at projected agent positions).
std::vector<Tensor2> render_frame_views(const Scene& scene, const Frame& frame,
                                        const ModelConfig& cfg, uint64_t seed);

std::array<double, 3> ego_kinematics_at(const Scene& scene, double t);

}  // namespace store3d
