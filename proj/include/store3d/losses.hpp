#pragma once

#include <array>
#include <span>
#include <vector>

#include "store3d/assignment.hpp"
#include "store3d/dataset.hpp"
#include "store3d/tensor.hpp"

namespace store3d {

struct LossConfig {
  double lambda_rel = 1.0;
  double lambda_aux = 0.25;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double gaussian_alpha = 2.0;
  double gaussian_beta = 4.0;
  double match_class_weight = 1.0;
  double match_l1_weight = 1.0;

  void validate() const;
};

struct LossBreakdown {
  double det_class = 0.0;
  double det_l1 = 0.0;
  double rel = 0.0;
  double aux = 0.0;
  double total = 0.0;
};

// Mean of -alpha * (1 - p_t)^gamma * log(p_t) with p_t = p for y=1 and 1-p
// for y=0. Predictions must be clamped away from {0, 1} by the caller;
// DomainError otherwise. d_pred (optional) receives dL/dp.
double focal_loss(std::span<const double> pred, std::span<const double> target,
                  double alpha, double gamma,
                  std::vector<double>* d_pred = nullptr);

// Corner-heatmap style focal: positives (y == 1) contribute -(1-p)^a log p,
// negatives -(1-y)^b p^a log(1-p); sum normalized by max(1, #positives).
double gaussian_focal_loss(std::span<const double> pred,
                           std::span<const double> target, double alpha,
                           double beta, std::vector<double>* d_pred = nullptr);

// Box parameterization used across losses and heads:
// (x, y, z, log l, log w, log h, sin yaw, cos yaw, vx, vy).
constexpr int kBoxParamDim = 10;
using BoxParamVec = std::array<double, kBoxParamDim>;

BoxParamVec encode_gt_box(const GtBox& gt);

// Mean absolute difference over pairs and parameters; subgradient at zero
// is zero. Rows of pred/gt are matched pairs.
double l1_box_loss(const Tensor2& pred, const Tensor2& gt,
                   Tensor2* d_pred = nullptr);

struct SetPredictions {
  Tensor2 class_probs;  // Q x C, entries in (0,1)
  Tensor2 box_params;   // Q x 10
};

struct SetTargets {
  std::vector<int> class_ids;  // per gt
  Tensor2 box_params;          // G x 10
};

struct SetMatchResult {
  double class_loss = 0.0;
  double l1_loss = 0.0;
  double match_cost = 0.0;                  // Hungarian total over matched pairs
  std::vector<std::pair<int, int>> matches;  // (prediction row, gt row)
  Tensor2 d_class_probs;
  Tensor2 d_box_params;
};

// Hungarian matching on class-prob + L1 cost; matched pairs incur focal and
// L1, unmatched predictions incur focal against all-background targets.
SetMatchResult set_matching_loss(const SetPredictions& pred,
                                 const SetTargets& gt, const LossConfig& cfg);

enum class RelevanceKind { plan, det };

// Per-query targets in [0,1]. plan: queries matched to a relevant gt get a
// Gaussian of the reference-point distance (sigma = half the gt BEV
// diagonal); det: matched queries 1, others 0. gt_relevant must cover every
// gt row (MissingLabels otherwise, signalled by size mismatch).
std::vector<double> relevance_targets(const std::vector<Point2>& query_xy,
                                      const std::vector<std::pair<int, int>>& matches,
                                      const std::vector<GtBox>& gts,
                                      const std::vector<char>& gt_relevant,
                                      RelevanceKind kind);

struct JointLossParts {
  double det_class = 0.0;
  double det_l1 = 0.0;
  double rel = 0.0;
  double aux = 0.0;
  // Stop-gradient contract: the relevance term must not carry an embedding
  // gradient. joint_loss rejects parts that claim one.
  bool rel_embedding_grad_present = false;
};

LossBreakdown joint_loss(const JointLossParts& parts, const LossConfig& cfg);

}  // namespace store3d
