#include "store3d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "store3d/rng.hpp"

namespace store3d {

std::pair<std::vector<int>, std::vector<int>> split_scenes(
    const SceneDataset& ds, double train_fraction) {
  int n = static_cast<int>(ds.scenes.size());
  int train = std::clamp(static_cast<int>(std::ceil(train_fraction * n)), 1,
                         std::max(1, n - 1));
  if (n == 1) train = 1;
  std::vector<int> a(train), b;
  std::iota(a.begin(), a.end(), 0);
  for (int i = train; i < n; ++i) b.push_back(i);
  if (b.empty()) b = a;  // degenerate single-scene datasets evaluate in-sample
  return {a, b};
}

GtBox gt_to_ego(const GtBox& gt, const SE2Pose& ego_pose) {
  SE2Pose inv = ego_pose.inverse();
  GtBox out = gt;
  out.box = transform_box(inv, gt.box);
  double c = std::cos(-ego_pose.rotation), s = std::sin(-ego_pose.rotation);
  out.velocity = {c * gt.velocity.first - s * gt.velocity.second,
                  s * gt.velocity.first + c * gt.velocity.second};
  return out;
}

namespace {

QuerySet first_frame_queries(const ModelParams& params, const ModelConfig& cfg) {
  auto reserve = init_queries(make_reserve_points(cfg), params.init_mlp, cfg.pe_freqs);
  auto anchors = init_queries(make_anchor_points(cfg), params.init_mlp, cfg.pe_freqs);
  return concat_queries(reserve, anchors);
}

FrameInput make_frame_input(const Scene& scene, const Frame& frame,
                            const ModelParams& params, const ModelConfig& cfg,
                            uint64_t seed) {
  FrameInput input;
  input.view_features = render_frame_views(scene, frame, cfg, seed);
  input.queries = first_frame_queries(params, cfg);
  input.ego_kinematics = ego_kinematics_at(scene, frame.timestamp);
  return input;
}

SetTargets make_targets(const std::vector<GtBox>& gts_ego, const ModelConfig& cfg) {
  SetTargets t;
  t.box_params = Tensor2(static_cast<int>(gts_ego.size()), kBoxParamDim);
  for (size_t g = 0; g < gts_ego.size(); ++g) {
    auto it = std::find(cfg.classes.begin(), cfg.classes.end(),
                        gts_ego[g].class_name);
    if (it == cfg.classes.end()) throw DegenerateInput("gt class not in model classes");
    t.class_ids.push_back(static_cast<int>(it - cfg.classes.begin()));
    auto enc = encode_gt_box(gts_ego[g]);
    std::copy(enc.begin(), enc.end(),
              t.box_params.row(static_cast<int>(g)).begin());
  }
  return t;
}

}  // namespace

FrameFeatures precompute_frame(const Scene& scene, const Frame& frame,
                               const ModelParams& params, const ModelConfig& cfg,
                               const ScheduleConfig& schedule, RunMode mode,
                               const std::map<std::string, RelevanceLabel>& labels,
                               uint64_t seed) {
  FrameFeatures ff;
  ff.frame_id = frame.frame_id;

  FrameInput input = make_frame_input(scene, frame, params, cfg, seed);
  uint64_t routing_seed = mix64(seed, hash_string(frame.frame_id));
  auto res = run_pipeline(input, params, cfg, schedule, mode, routing_seed);

  std::vector<double> ego_embed = mlp_forward(
      params.ego_mlp, std::span<const double>(input.ego_kinematics));
  std::span<const double> ego_span =
      cfg.relevance_kind == RelevanceKind::plan ? std::span<const double>(ego_embed)
                                                : std::span<const double>();
  QuerySet final_set;
  final_set.embeddings = res.final_query_embeddings;
  final_set.reference_points = res.final_ref_points;
  final_set.original_index.resize(final_set.embeddings.rows);
  std::iota(final_set.original_index.begin(), final_set.original_index.end(), 0);
  final_set.propagated.assign(final_set.embeddings.rows, 0);
  const MlpParams& head = cfg.relevance_kind == RelevanceKind::plan
                              ? params.rel_head_plan
                              : params.rel_head_det;
  (void)head;
  ff.head_inputs = relevance_head_inputs(final_set, res.pyramids,
                                         params.rel_deform, ego_span,
                                         cfg.relevance_kind, cfg);
  ff.final_embeddings = res.final_query_embeddings;
  ff.ref_points = res.final_ref_points;

  SE2Pose pose = ego_pose_at(scene, frame.timestamp);
  auto gts = frame_ground_truth(scene, frame);
  for (const auto& gt : gts) {
    GtBox ego_gt = gt_to_ego(gt, pose);
    if (norm(ego_gt.box.center) > cfg.bev_range) continue;  // outside model range
    ff.gts_ego.push_back(ego_gt);
    auto it = labels.find(gt.agent_id);
    bool relevant = it != labels.end() && !it->second.uncovered && it->second.relevant;
    ff.gt_relevant.push_back(relevant ? 1 : 0);
  }
  ff.targets = make_targets(ff.gts_ego, cfg);

  // Aux supervision on the finest pyramid level of each view.
  for (int v = 0; v < cfg.views; ++v) {
    ff.finest_tokens.push_back(res.pyramids[v].levels.front());
    std::vector<double> heat(static_cast<size_t>(cfg.grid_h) * cfg.grid_w, 0.0);
    std::vector<std::array<double, 3>> pos;
    for (const auto& gt : ff.gts_ego) {
      ViewPoint vp = project_to_view(gt.box.center, cfg.views, cfg.bev_range);
      if (vp.view != v) continue;
      double fx = vp.u * (cfg.grid_w - 1);
      double fy = vp.v * (cfg.grid_h - 1);
      int cx = std::clamp(static_cast<int>(std::lround(fx)), 0, cfg.grid_w - 1);
      int cy = std::clamp(static_cast<int>(std::lround(fy)), 0, cfg.grid_h - 1);
      constexpr double kSigma = 1.0;
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) {
          int x = cx + dx, y = cy + dy;
          if (x < 0 || x >= cfg.grid_w || y < 0 || y >= cfg.grid_h) continue;
          double g = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
          heat[y * cfg.grid_w + x] = std::max(heat[y * cfg.grid_w + x], g);
        }
      }
      heat[cy * cfg.grid_w + cx] = 1.0;
      pos.push_back({static_cast<double>(cy * cfg.grid_w + cx), fx - cx, fy - cy});
    }
    ff.aux_heat.push_back(std::move(heat));
    ff.aux_pos.push_back(std::move(pos));
  }
  return ff;
}

double roc_auc(const std::vector<double>& scores, const std::vector<char>& labels) {
  if (scores.size() != labels.size()) throw ShapeMismatch("auc sizes");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scores[a] < scores[b]; });

  // Mann-Whitney with average ranks for ties.
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg = 0.5 * (i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  long npos = 0, nneg = 0;
  for (size_t k = 0; k < labels.size(); ++k) {
    if (labels[k]) {
      pos_rank_sum += rank[k];
      ++npos;
    } else {
      ++nneg;
    }
  }
  if (npos == 0 || nneg == 0) throw EmptyDistribution("AUC needs both classes");
  double u = pos_rank_sum - npos * (npos + 1.0) / 2.0;
  return u / (static_cast<double>(npos) * nneg);
}

namespace {

std::map<std::string, std::map<std::string, RelevanceLabel>> index_labels(
    const std::vector<FrameLabels>& labels) {
  std::map<std::string, std::map<std::string, RelevanceLabel>> out;
  for (const auto& fl : labels) {
    auto& m = out[fl.frame_id];
    for (const auto& l : fl.labels) m[l.agent_id] = l;
  }
  return out;
}

std::vector<FrameFeatures> precompute_scenes(
    const SceneDataset& ds, const std::vector<int>& scene_indices,
    const ModelParams& params, const ModelConfig& cfg,
    const ScheduleConfig& schedule, RunMode mode,
    const std::vector<FrameLabels>& labels, uint64_t seed) {
  auto label_idx = index_labels(labels);
  std::vector<FrameFeatures> out;
  for (int si : scene_indices) {
    const Scene& scene = ds.scenes[si];
    for (const auto& frame : scene.frames) {
      static const std::map<std::string, RelevanceLabel> kEmpty;
      auto it = label_idx.find(frame.frame_id);
      const auto& frame_labels = it != label_idx.end() ? it->second : kEmpty;
      auto ff = precompute_frame(scene, frame, params, cfg, schedule, mode,
                                 frame_labels, seed);
      if (!ff.gts_ego.empty()) out.push_back(std::move(ff));
    }
  }
  return out;
}

// Matching for relevance targets: the set-loss assignment under the current
// detection heads.
std::vector<std::pair<int, int>> frame_matches(const FrameFeatures& ff,
                                               const ModelParams& params,
                                               const LossConfig& lcfg) {
  SetPredictions pred;
  pred.class_probs = matmul_nt(ff.final_embeddings, params.cls_head);
  add_row_inplace(pred.class_probs, params.cls_bias);
  for (double& v : pred.class_probs.data) v = sigmoid(v);
  pred.box_params = matmul_nt(ff.final_embeddings, params.box_head);
  add_row_inplace(pred.box_params, params.box_bias);
  for (int j = 0; j < pred.box_params.rows; ++j) {
    pred.box_params.at(j, 0) += ff.ref_points[j][0];
    pred.box_params.at(j, 1) += ff.ref_points[j][1];
    pred.box_params.at(j, 2) += ff.ref_points[j][2];
  }
  return set_matching_loss(pred, ff.targets, lcfg).matches;
}

std::vector<Point2> ref_xy(const FrameFeatures& ff) {
  std::vector<Point2> xy;
  xy.reserve(ff.ref_points.size());
  for (const auto& r : ff.ref_points) xy.push_back({r[0], r[1]});
  return xy;
}

}  // namespace

RelevanceTrainResult train_relevance_head(ModelParams& params,
                                          const ModelConfig& cfg,
                                          const ScheduleConfig& schedule,
                                          const LossConfig& loss_cfg,
                                          const SceneDataset& ds,
                                          const std::vector<FrameLabels>& labels,
                                          const TrainConfig& tc) {
  auto [train_idx, eval_idx] = split_scenes(ds, tc.train_scene_fraction);
  auto frames = precompute_scenes(ds, train_idx, params, cfg, schedule,
                                  RunMode::dense, labels, tc.seed);
  if (frames.empty()) throw EmptyDistribution("no training frames with gt");

  // Targets are fixed for the whole run (matching under the frozen heads).
  std::vector<std::vector<double>> frame_targets;
  for (const auto& ff : frames) {
    auto matches = frame_matches(ff, params, loss_cfg);
    frame_targets.push_back(relevance_targets(ref_xy(ff), matches, ff.gts_ego,
                                              ff.gt_relevant,
                                              cfg.relevance_kind));
  }

  MlpParams& head = cfg.relevance_kind == RelevanceKind::plan
                        ? params.rel_head_plan
                        : params.rel_head_det;
  RelevanceTrainResult result;
  result.iterations = tc.iterations;

  size_t frames_per_iter = tc.batch_frames > 0
                               ? std::min<size_t>(tc.batch_frames, frames.size())
                               : frames.size();
  for (int iter = 0; iter < tc.iterations; ++iter) {
    // Collect the batch rows (scores + targets), applying the warmup-driven
    // sparsity to the supervised subset.
    std::vector<double> preds;
    std::vector<double> targets;
    std::vector<std::pair<size_t, int>> rows;  // (frame idx, query row)
    double ratio = training_keep_ratio(iter, schedule.warmup_start,
                                       schedule.warmup_end, schedule.tkr);
    for (size_t b = 0; b < frames_per_iter; ++b) {
      size_t fi = (static_cast<size_t>(iter) * frames_per_iter + b) % frames.size();
      const auto& ff = frames[fi];
      int q = ff.head_inputs.rows;
      std::vector<double> scores(q);
      for (int j = 0; j < q; ++j) {
        scores[j] = relevance_head_score(head, ff.head_inputs.row(j));
      }
      std::vector<int> active(q);
      std::iota(active.begin(), active.end(), 0);
      if (ratio < 1.0) {
        int keep = std::clamp(static_cast<int>(std::floor(ratio * q)), 1, q);
        GumbelTopkConfig route{keep, 1.0, mix64(tc.seed, 0xa11, iter),
                               TopkMode::straight_through_train,
                               static_cast<uint64_t>(iter)};
        active = gumbel_topk(scores, route).kept;
      }
      for (int j : active) {
        preds.push_back(std::clamp(scores[j], 1e-7, 1.0 - 1e-7));
        targets.push_back(frame_targets[fi][j]);
        rows.emplace_back(fi, j);
      }
    }

    std::vector<double> d_pred;
    result.final_loss = gaussian_focal_loss(preds, targets, loss_cfg.gaussian_alpha,
                                            loss_cfg.gaussian_beta, &d_pred);
    MlpGrads grads = MlpGrads::zeros_like(head);
    for (size_t r = 0; r < rows.size(); ++r) {
      auto [fi, j] = rows[r];
      relevance_head_score_backward(head, frames[fi].head_inputs.row(j),
                                    d_pred[r], &grads);
    }
    // Clip the gradient norm; focal losses spike when a positive saturates.
    double norm_sq = 0.0;
    auto flat = pack_mlp_grads(grads);
    for (double v : flat) norm_sq += v * v;
    double gnorm = std::sqrt(norm_sq);
    constexpr double kMaxNorm = 5.0;
    if (gnorm > kMaxNorm) grads.scale(kMaxNorm / gnorm);
    mlp_apply_step(&head, grads, tc.lr);
  }

  auto eval = eval_relevance_auc(params, cfg, schedule, ds, labels, eval_idx,
                                 tc.seed);
  result.auc = eval.auc;
  result.eval_agents = eval.eval_agents;
  return result;
}

RelevanceTrainResult eval_relevance_auc(const ModelParams& params,
                                        const ModelConfig& cfg,
                                        const ScheduleConfig& schedule,
                                        const SceneDataset& ds,
                                        const std::vector<FrameLabels>& labels,
                                        const std::vector<int>& scene_indices,
                                        uint64_t seed) {
  auto frames = precompute_scenes(ds, scene_indices, params, cfg, schedule,
                                  RunMode::dense, labels, seed);
  const MlpParams& head = cfg.relevance_kind == RelevanceKind::plan
                              ? params.rel_head_plan
                              : params.rel_head_det;
  LossConfig lcfg;  // match-cost defaults
  auto label_idx = index_labels(labels);

  std::vector<double> scores;
  std::vector<char> truth;
  for (const auto& ff : frames) {
    auto lit = label_idx.find(ff.frame_id);
    if (lit == label_idx.end()) continue;
    auto matches = frame_matches(ff, params, lcfg);
    for (auto [qi, gi] : matches) {
      const auto& agent_id = ff.gts_ego[gi].agent_id;
      auto ait = lit->second.find(agent_id);
      if (ait == lit->second.end() || ait->second.uncovered) continue;
      scores.push_back(relevance_head_score(head, ff.head_inputs.row(qi)));
      truth.push_back(ait->second.relevant ? 1 : 0);
    }
  }
  RelevanceTrainResult out;
  out.eval_agents = static_cast<int>(scores.size());
  out.auc = roc_auc(scores, truth);
  return out;
}

// ---------------------------------------------------------------------------
// Detection-head training

namespace {

struct LinearGrads {
  Tensor2 dw;
  std::vector<double> db;

  LinearGrads(int rows, int cols) : dw(rows, cols), db(rows, 0.0) {}
  void step_into(Tensor2& w, std::vector<double>& b, double lr) const {
    for (size_t i = 0; i < w.data.size(); ++i) w.data[i] -= lr * dw.data[i];
    for (size_t i = 0; i < b.size(); ++i) b[i] -= lr * db[i];
  }
};

// d(loss)/d(logit grid) folded into weight grads for a sigmoid linear head.
void accumulate_linear(const Tensor2& features, const Tensor2& d_out,
                       LinearGrads* g) {
  for (int r = 0; r < features.rows; ++r) {
    for (int o = 0; o < d_out.cols; ++o) {
      double d = d_out.at(r, o);
      if (d == 0.0) continue;
      auto feat = features.row(r);
      auto wrow = g->dw.row(o);
      for (int k = 0; k < features.cols; ++k) wrow[k] += d * feat[k];
      g->db[o] += d;
    }
  }
}

struct AuxEval {
  double loss = 0.0;
  std::vector<Tensor2> d_logits;  // per view, (h0*w0) x 3
};

AuxEval eval_aux(const FrameFeatures& ff, const ModelParams& params,
                 const LossConfig& lcfg) {
  AuxEval out;
  int views = static_cast<int>(ff.finest_tokens.size());
  double cls_total = 0.0, reg_total = 0.0;
  int reg_count = 0;
  for (int v = 0; v < views; ++v) {
    const Tensor2& tokens = ff.finest_tokens[v];
    Tensor2 logits = matmul_nt(tokens, params.aux_head);
    add_row_inplace(logits, params.aux_bias);
    Tensor2 d_logits(logits.rows, logits.cols);

    std::vector<double> obj(logits.rows);
    for (int i = 0; i < logits.rows; ++i) {
      obj[i] = std::clamp(sigmoid(logits.at(i, 0)), 1e-7, 1.0 - 1e-7);
    }
    std::vector<double> d_obj;
    cls_total += gaussian_focal_loss(obj, ff.aux_heat[v], lcfg.gaussian_alpha,
                                     lcfg.gaussian_beta, &d_obj);
    for (int i = 0; i < logits.rows; ++i) {
      d_logits.at(i, 0) = d_obj[i] * obj[i] * (1.0 - obj[i]);
    }
    for (const auto& p : ff.aux_pos[v]) {
      int cell = static_cast<int>(p[0]);
      for (int k = 0; k < 2; ++k) {
        double diff = logits.at(cell, 1 + k) - p[1 + k];
        reg_total += std::abs(diff);
        d_logits.at(cell, 1 + k) = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
        ++reg_count;
      }
    }
    out.d_logits.push_back(std::move(d_logits));
  }
  double reg_norm = reg_count > 0 ? 1.0 / reg_count : 0.0;
  for (auto& d : out.d_logits) {
    for (int i = 0; i < d.rows; ++i) {
      d.at(i, 1) *= reg_norm;
      d.at(i, 2) *= reg_norm;
    }
  }
  out.loss = cls_total / std::max(1, views) + reg_total * reg_norm;
  // The per-view classification terms were each normalized internally; keep
  // the gradient consistent with the mean over views.
  for (auto& d : out.d_logits) {
    for (int i = 0; i < d.rows; ++i) d.at(i, 0) /= std::max(1, views);
  }
  return out;
}

}  // namespace

DetectionTrainResult train_detection_heads(ModelParams& params,
                                           const ModelConfig& cfg,
                                           const ScheduleConfig& schedule,
                                           const LossConfig& loss_cfg,
                                           const SceneDataset& ds,
                                           const std::vector<FrameLabels>& labels,
                                           const TrainConfig& tc, RunMode mode) {
  auto [train_idx, eval_idx] = split_scenes(ds, tc.train_scene_fraction);
  (void)eval_idx;
  auto frames = precompute_scenes(ds, train_idx, params, cfg, schedule, mode,
                                  labels, tc.seed);
  if (frames.empty()) throw EmptyDistribution("no training frames with gt");

  int c = static_cast<int>(cfg.classes.size());
  int d = cfg.embed_dim;
  DetectionTrainResult result;
  result.iterations = tc.det_iterations;

  for (int iter = 0; iter < tc.det_iterations; ++iter) {
    LinearGrads g_cls(c, d), g_box(kBoxParamDim, d), g_aux(3, d);
    double loss_sum = 0.0;
    int batch = std::min<int>(tc.batch_frames, static_cast<int>(frames.size()));
    for (int b = 0; b < batch; ++b) {
      size_t fi = (static_cast<size_t>(iter) * batch + b) % frames.size();
      const auto& ff = frames[fi];

      SetPredictions pred;
      Tensor2 logits = matmul_nt(ff.final_embeddings, params.cls_head);
      add_row_inplace(logits, params.cls_bias);
      pred.class_probs = logits;
      for (double& v : pred.class_probs.data) v = sigmoid(v);
      pred.box_params = matmul_nt(ff.final_embeddings, params.box_head);
      add_row_inplace(pred.box_params, params.box_bias);
      for (int j = 0; j < pred.box_params.rows; ++j) {
        pred.box_params.at(j, 0) += ff.ref_points[j][0];
        pred.box_params.at(j, 1) += ff.ref_points[j][1];
        pred.box_params.at(j, 2) += ff.ref_points[j][2];
      }

      auto sm = set_matching_loss(pred, ff.targets, loss_cfg);
      auto aux = eval_aux(ff, params, loss_cfg);
      loss_sum += sm.class_loss + sm.l1_loss + loss_cfg.lambda_aux * aux.loss;

      Tensor2 d_logits(sm.d_class_probs.rows, sm.d_class_probs.cols);
      for (int j = 0; j < d_logits.rows; ++j) {
        for (int k = 0; k < d_logits.cols; ++k) {
          double p = pred.class_probs.at(j, k);
          d_logits.at(j, k) = sm.d_class_probs.at(j, k) * p * (1.0 - p);
        }
      }
      accumulate_linear(ff.final_embeddings, d_logits, &g_cls);
      accumulate_linear(ff.final_embeddings, sm.d_box_params, &g_box);
      for (size_t v = 0; v < ff.finest_tokens.size(); ++v) {
        Tensor2 d_aux = aux.d_logits[v];
        for (double& val : d_aux.data) val *= loss_cfg.lambda_aux;
        accumulate_linear(ff.finest_tokens[v], d_aux, &g_aux);
      }
    }
    double scale = 1.0 / batch;
    for (double& v : g_cls.dw.data) v *= scale;
    for (double& v : g_cls.db) v *= scale;
    for (double& v : g_box.dw.data) v *= scale;
    for (double& v : g_box.db) v *= scale;
    for (double& v : g_aux.dw.data) v *= scale;
    for (double& v : g_aux.db) v *= scale;
    g_cls.step_into(params.cls_head, params.cls_bias, tc.det_lr);
    g_box.step_into(params.box_head, params.box_bias, tc.det_lr);
    g_aux.step_into(params.aux_head, params.aux_bias, tc.det_lr);
    result.final_loss = loss_sum / batch;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Packed joint loss for gradient checking

size_t packed_head_size(const ModelParams& params, RelevanceKind kind) {
  const MlpParams& head = kind == RelevanceKind::plan ? params.rel_head_plan
                                                      : params.rel_head_det;
  return mlp_param_count(head) + params.cls_head.data.size() +
         params.cls_bias.size() + params.box_head.data.size() +
         params.box_bias.size() + params.aux_head.data.size() +
         params.aux_bias.size();
}

std::vector<double> pack_heads(const ModelParams& params, RelevanceKind kind) {
  const MlpParams& head = kind == RelevanceKind::plan ? params.rel_head_plan
                                                      : params.rel_head_det;
  std::vector<double> out = pack_mlp(head);
  auto push = [&out](const std::vector<double>& v) {
    out.insert(out.end(), v.begin(), v.end());
  };
  out.insert(out.end(), params.cls_head.data.begin(), params.cls_head.data.end());
  push(params.cls_bias);
  out.insert(out.end(), params.box_head.data.begin(), params.box_head.data.end());
  push(params.box_bias);
  out.insert(out.end(), params.aux_head.data.begin(), params.aux_head.data.end());
  push(params.aux_bias);
  return out;
}

void unpack_heads(std::span<const double> flat, RelevanceKind kind,
                  ModelParams* params) {
  MlpParams& head = kind == RelevanceKind::plan ? params->rel_head_plan
                                                : params->rel_head_det;
  size_t pos = mlp_param_count(head);
  unpack_mlp(flat.subspan(0, pos), &head);
  auto take = [&](double* dst, size_t n) {
    std::copy(flat.begin() + pos, flat.begin() + pos + n, dst);
    pos += n;
  };
  take(params->cls_head.data.data(), params->cls_head.data.size());
  take(params->cls_bias.data(), params->cls_bias.size());
  take(params->box_head.data.data(), params->box_head.data.size());
  take(params->box_bias.data(), params->box_bias.size());
  take(params->aux_head.data.data(), params->aux_head.data.size());
  take(params->aux_bias.data(), params->aux_bias.size());
  if (pos != flat.size()) throw ShapeMismatch("packed head size");
}

double joint_loss_and_grad(const FrameFeatures& ff, const ModelParams& params,
                           const ModelConfig& cfg, const LossConfig& lcfg,
                           std::vector<double>* packed_grad,
                           LossBreakdown* breakdown) {
  const MlpParams& head = cfg.relevance_kind == RelevanceKind::plan
                              ? params.rel_head_plan
                              : params.rel_head_det;
  int c = static_cast<int>(cfg.classes.size());
  int d = cfg.embed_dim;

  // Detection terms.
  SetPredictions pred;
  Tensor2 logits = matmul_nt(ff.final_embeddings, params.cls_head);
  add_row_inplace(logits, params.cls_bias);
  pred.class_probs = logits;
  for (double& v : pred.class_probs.data) v = sigmoid(v);
  pred.box_params = matmul_nt(ff.final_embeddings, params.box_head);
  add_row_inplace(pred.box_params, params.box_bias);
  for (int j = 0; j < pred.box_params.rows; ++j) {
    pred.box_params.at(j, 0) += ff.ref_points[j][0];
    pred.box_params.at(j, 1) += ff.ref_points[j][1];
    pred.box_params.at(j, 2) += ff.ref_points[j][2];
  }
  auto sm = set_matching_loss(pred, ff.targets, lcfg);

  // Relevance term on the matched assignment; targets depend only on fixed
  // reference geometry and labels.
  auto targets = relevance_targets(ref_xy(ff), sm.matches, ff.gts_ego,
                                   ff.gt_relevant, cfg.relevance_kind);
  int q = ff.head_inputs.rows;
  std::vector<double> rel_scores(q);
  for (int j = 0; j < q; ++j) {
    rel_scores[j] = std::clamp(
        relevance_head_score(head, ff.head_inputs.row(j)), 1e-7, 1.0 - 1e-7);
  }
  std::vector<double> d_rel;
  double rel_loss = gaussian_focal_loss(rel_scores, targets, lcfg.gaussian_alpha,
                                        lcfg.gaussian_beta, &d_rel);

  auto aux = eval_aux(ff, params, lcfg);

  JointLossParts parts;
  parts.det_class = sm.class_loss;
  parts.det_l1 = sm.l1_loss;
  parts.rel = rel_loss;
  parts.aux = aux.loss;
  LossBreakdown bd = joint_loss(parts, lcfg);
  if (breakdown) *breakdown = bd;

  if (packed_grad) {
    MlpParams head_copy = head;  // gradient shapes only
    MlpGrads head_grads = MlpGrads::zeros_like(head_copy);
    for (int j = 0; j < q; ++j) {
      relevance_head_score_backward(head, ff.head_inputs.row(j),
                                    lcfg.lambda_rel * d_rel[j], &head_grads);
    }

    LinearGrads g_cls(c, d), g_box(kBoxParamDim, d), g_aux(3, d);
    Tensor2 d_logits(sm.d_class_probs.rows, sm.d_class_probs.cols);
    for (int j = 0; j < d_logits.rows; ++j) {
      for (int k = 0; k < d_logits.cols; ++k) {
        double p = pred.class_probs.at(j, k);
        d_logits.at(j, k) = sm.d_class_probs.at(j, k) * p * (1.0 - p);
      }
    }
    accumulate_linear(ff.final_embeddings, d_logits, &g_cls);
    accumulate_linear(ff.final_embeddings, sm.d_box_params, &g_box);
    for (size_t v = 0; v < ff.finest_tokens.size(); ++v) {
      Tensor2 d_aux = aux.d_logits[v];
      for (double& val : d_aux.data) val *= lcfg.lambda_aux;
      accumulate_linear(ff.finest_tokens[v], d_aux, &g_aux);
    }

    packed_grad->clear();
    auto hg = pack_mlp_grads(head_grads);
    packed_grad->insert(packed_grad->end(), hg.begin(), hg.end());
    packed_grad->insert(packed_grad->end(), g_cls.dw.data.begin(), g_cls.dw.data.end());
    packed_grad->insert(packed_grad->end(), g_cls.db.begin(), g_cls.db.end());
    packed_grad->insert(packed_grad->end(), g_box.dw.data.begin(), g_box.dw.data.end());
    packed_grad->insert(packed_grad->end(), g_box.db.begin(), g_box.db.end());
    packed_grad->insert(packed_grad->end(), g_aux.dw.data.begin(), g_aux.dw.data.end());
    packed_grad->insert(packed_grad->end(), g_aux.db.begin(), g_aux.db.end());
  }
  return bd.total;
}

// ---------------------------------------------------------------------------
// Simulation

SimulateOutput simulate(const SceneDataset& ds,
                        const std::vector<int>& scene_indices,
                        const ModelParams& params, const ModelConfig& cfg,
                        const ScheduleConfig& schedule, RunMode mode,
                        uint64_t seed) {
  SimulateOutput out;
  for (int si : scene_indices) {
    const Scene& scene = ds.scenes[si];
    QuerySet prev_topk;
    SE2Pose prev_pose;
    bool first = true;

    for (size_t fi = 0; fi < scene.frames.size(); ++fi) {
      const Frame& frame = scene.frames[fi];
      SE2Pose pose = ego_pose_at(scene, frame.timestamp);

      QuerySet carried;
      if (first) {
        carried = init_queries(make_reserve_points(cfg), params.init_mlp,
                               cfg.pe_freqs);
      } else {
        SE2Pose motion = pose.inverse().compose(prev_pose);
        carried = propagate_queries(prev_topk, motion);
      }
      FrameInput input;
      input.view_features = render_frame_views(scene, frame, cfg, seed);
      input.queries = concat_queries(
          carried, init_queries(make_anchor_points(cfg), params.init_mlp,
                                cfg.pe_freqs));
      input.ego_kinematics = ego_kinematics_at(scene, frame.timestamp);

      uint64_t routing_seed = mix64(seed, si, fi);
      auto res = run_pipeline(input, params, cfg, schedule, mode, routing_seed);

      // Carry the top-scored queries into the next frame.
      int k = std::min<int>(cfg.num_propagated, res.final_queries.embeddings.rows);
      std::vector<int> order(res.final_scores.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return res.final_scores[a] > res.final_scores[b];
      });
      QuerySet topk;
      topk.embeddings = Tensor2(k, cfg.embed_dim);
      topk.reference_points.resize(k);
      topk.original_index.resize(k);
      topk.propagated.assign(k, 1);
      for (int i = 0; i < k; ++i) {
        auto src = res.final_queries.embeddings.row(order[i]);
        std::copy(src.begin(), src.end(), topk.embeddings.row(i).begin());
        topk.reference_points[i] = res.final_queries.reference_points[order[i]];
        topk.original_index[i] = i;
      }
      prev_topk = std::move(topk);
      prev_pose = pose;
      first = false;

      double cr = std::cos(pose.rotation), sr = std::sin(pose.rotation);
      for (const auto& pd : res.detections) {
        Detection det;
        det.frame_id = frame.frame_id;
        det.class_name = pd.class_name;
        det.score = pd.score;
        det.box = transform_box(pose, OrientedBoxBEV({pd.x, pd.y}, pd.yaw,
                                                     pd.length, pd.width));
        det.z_center = pd.z;
        det.height = pd.height;
        det.velocity = {cr * pd.vx - sr * pd.vy, sr * pd.vx + cr * pd.vy};
        det.attribute = "moving";
        out.detections.push_back(std::move(det));
      }
      out.traces.emplace_back(frame.frame_id, std::move(res.trace));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient suite

std::vector<GradcheckRow> run_gradient_suite(const RunConfig& rc) {
  std::vector<GradcheckRow> rows;
  constexpr double kTol = 1e-4;
  constexpr double kStep = 1e-5;
  Rng rng(mix64(rc.seed, 0x97adc0));

  auto add_row = [&rows](const std::string& name, double err) {
    rows.push_back({name, err, kTol, err < kTol});
  };

  {  // Soft Gumbel-TopK Jacobian against central differences.
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<double> scores(8), probe(8);
      for (auto& s : scores) s = rng.uniform(-1.0, 1.0);
      for (auto& p : probe) p = rng.uniform(-1.0, 1.0);
      GumbelTopkConfig cfg{3, 0.7, 11, TopkMode::soft, 0};
      auto res = gumbel_topk(scores, cfg);
      auto analytic = res.backward(probe);
      auto f = [&](std::span<const double> s) {
        auto r = gumbel_topk(s, cfg);
        double acc = 0.0;
        for (size_t i = 0; i < probe.size(); ++i) acc += probe[i] * r.soft_weights[i];
        return acc;
      };
      worst = std::max(worst, finite_diff_check(f, scores, analytic, kStep));
    }
    add_row("gumbel_topk_soft_jacobian", worst);
  }

  // A small synthetic world shared by the structured checks.
  RunConfig cfg = rc;
  cfg.dataset.scenes = 2;
  cfg.dataset.agents_per_scene = 6;
  auto ds = gen_synthetic(cfg.dataset);
  auto labels = label_dataset(ds, cfg.relevance);
  auto params = ModelParams::init(cfg.model, cfg.seed);
  auto label_idx = index_labels(labels);

  FrameFeatures ff;
  bool have_frame = false;
  for (const auto& frame : ds.scenes[0].frames) {
    auto it = label_idx.find(frame.frame_id);
    static const std::map<std::string, RelevanceLabel> kEmpty;
    ff = precompute_frame(ds.scenes[0], frame, params, cfg.model, cfg.schedule,
                          RunMode::dense, it != label_idx.end() ? it->second : kEmpty,
                          cfg.seed);
    if (!ff.gts_ego.empty()) {
      have_frame = true;
      break;
    }
  }
  if (!have_frame) throw EmptyDistribution("no frame with gt for gradcheck");

  {  // Relevance head path (Eq. 3-4): mean score wrt head parameters.
    MlpParams head = cfg.model.relevance_kind == RelevanceKind::plan
                         ? params.rel_head_plan
                         : params.rel_head_det;
    auto theta0 = pack_mlp(head);
    MlpGrads grads = MlpGrads::zeros_like(head);
    int q = ff.head_inputs.rows;
    for (int j = 0; j < q; ++j) {
      relevance_head_score_backward(head, ff.head_inputs.row(j), 1.0 / q, &grads);
    }
    auto analytic = pack_mlp_grads(grads);
    MlpParams probe_head = head;
    auto f = [&](std::span<const double> theta) {
      unpack_mlp(theta, &probe_head);
      double acc = 0.0;
      for (int j = 0; j < q; ++j) {
        acc += relevance_head_score(probe_head, ff.head_inputs.row(j));
      }
      return acc / q;
    };
    add_row("relevance_head_path", finite_diff_check(f, theta0, analytic, kStep));
  }

  {  // Focal loss wrt predictions.
    std::vector<double> preds(24), targets(24);
    for (size_t i = 0; i < preds.size(); ++i) {
      preds[i] = rng.uniform(0.05, 0.95);
      targets[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    }
    std::vector<double> analytic;
    focal_loss(preds, targets, rc.loss.focal_alpha, rc.loss.focal_gamma, &analytic);
    auto f = [&](std::span<const double> p) {
      return focal_loss(p, targets, rc.loss.focal_alpha, rc.loss.focal_gamma);
    };
    add_row("focal_loss", finite_diff_check(f, preds, analytic, kStep));
  }

  {  // Gaussian focal loss wrt predictions.
    std::vector<double> preds(24), targets(24);
    for (size_t i = 0; i < preds.size(); ++i) {
      preds[i] = rng.uniform(0.05, 0.95);
      double r = rng.uniform();
      targets[i] = r < 0.2 ? 1.0 : (r < 0.6 ? rng.uniform(0.0, 0.9) : 0.0);
    }
    std::vector<double> analytic;
    gaussian_focal_loss(preds, targets, rc.loss.gaussian_alpha,
                        rc.loss.gaussian_beta, &analytic);
    auto f = [&](std::span<const double> p) {
      return gaussian_focal_loss(p, targets, rc.loss.gaussian_alpha,
                                 rc.loss.gaussian_beta);
    };
    add_row("gaussian_focal_loss", finite_diff_check(f, preds, analytic, kStep));
  }

  {  // L1 box loss wrt predictions (kept away from the kink at zero).
    Tensor2 pred(4, kBoxParamDim), gt(4, kBoxParamDim);
    for (size_t i = 0; i < pred.data.size(); ++i) {
      gt.data[i] = rng.uniform(-2, 2);
      double delta = rng.uniform(0.05, 0.5) * (rng.uniform() < 0.5 ? -1 : 1);
      pred.data[i] = gt.data[i] + delta;
    }
    Tensor2 d_pred;
    l1_box_loss(pred, gt, &d_pred);
    auto f = [&](std::span<const double> p) {
      Tensor2 t(pred.rows, pred.cols);
      std::copy(p.begin(), p.end(), t.data.begin());
      return l1_box_loss(t, gt);
    };
    add_row("l1_box_loss", finite_diff_check(f, pred.data, d_pred.data, kStep));
  }

  {  // Joint loss wrt every trained head parameter.
    auto theta0 = pack_heads(params, cfg.model.relevance_kind);
    std::vector<double> analytic;
    joint_loss_and_grad(ff, params, cfg.model, rc.loss, &analytic);
    ModelParams probe = params;
    auto f = [&](std::span<const double> theta) {
      unpack_heads(theta, cfg.model.relevance_kind, &probe);
      return joint_loss_and_grad(ff, probe, cfg.model, rc.loss, nullptr);
    };
    add_row("joint_loss_heads", finite_diff_check(f, theta0, analytic, kStep));
  }

  {  // Stop-gradient: the relevance term supplies no embedding gradient.
    JointLossParts parts;
    parts.rel = 0.5;
    parts.rel_embedding_grad_present = false;
    joint_loss(parts, rc.loss);  // must not throw
    bool threw = false;
    parts.rel_embedding_grad_present = true;
    try {
      joint_loss(parts, rc.loss);
    } catch (const CheckFailure&) {
      threw = true;
    }
    add_row("relevance_stop_gradient", threw ? 0.0 : 1.0);
  }

  return rows;
}

}  // namespace store3d
