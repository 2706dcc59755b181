#include "store3d/losses.hpp"

#include <algorithm>
#include <cmath>

namespace store3d {

void LossConfig::validate() const {
  for (double v : {lambda_rel, lambda_aux, focal_alpha, focal_gamma,
                   gaussian_alpha, gaussian_beta, match_class_weight,
                   match_l1_weight}) {
    if (!std::isfinite(v) || v < 0) throw ConfigError("loss weights must be finite and >= 0");
  }
}

double focal_loss(std::span<const double> pred, std::span<const double> target,
                  double alpha, double gamma, std::vector<double>* d_pred) {
  if (pred.size() != target.size()) throw ShapeMismatch("focal pred/target size");
  if (pred.empty()) return 0.0;
  if (d_pred) d_pred->assign(pred.size(), 0.0);
  double loss = 0.0;
  double inv_n = 1.0 / static_cast<double>(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) {
    double p = pred[i];
    if (!(p > 0.0) || !(p < 1.0)) throw DomainError("focal prediction not in (0,1)");
    bool pos = target[i] >= 0.5;
    double pt = pos ? p : 1.0 - p;
    double one_m = 1.0 - pt;
    loss += -alpha * std::pow(one_m, gamma) * std::log(pt) * inv_n;
    if (d_pred) {
      // d/dpt of -alpha (1-pt)^g log(pt):
      double dpt = -alpha * (-gamma * std::pow(one_m, gamma - 1.0) * std::log(pt) +
                             std::pow(one_m, gamma) / pt);
      (*d_pred)[i] = (pos ? dpt : -dpt) * inv_n;
    }
  }
  return loss;
}

double gaussian_focal_loss(std::span<const double> pred,
                           std::span<const double> target, double alpha,
                           double beta, std::vector<double>* d_pred) {
  if (pred.size() != target.size()) throw ShapeMismatch("gaussian focal sizes");
  if (d_pred) d_pred->assign(pred.size(), 0.0);
  double loss = 0.0;
  int positives = 0;
  for (double t : target) {
    if (t >= 1.0) ++positives;
  }
  double norm = 1.0 / std::max(1, positives);
  for (size_t i = 0; i < pred.size(); ++i) {
    double p = pred[i];
    if (!(p > 0.0) || !(p < 1.0)) throw DomainError("gaussian focal prediction not in (0,1)");
    double y = target[i];
    if (y >= 1.0) {
      loss += -std::pow(1.0 - p, alpha) * std::log(p) * norm;
      if (d_pred) {
        (*d_pred)[i] = (alpha * std::pow(1.0 - p, alpha - 1.0) * std::log(p) -
                        std::pow(1.0 - p, alpha) / p) *
                       norm;
      }
    } else {
      double neg_w = std::pow(1.0 - y, beta);
      loss += -neg_w * std::pow(p, alpha) * std::log(1.0 - p) * norm;
      if (d_pred) {
        (*d_pred)[i] = neg_w *
                       (-alpha * std::pow(p, alpha - 1.0) * std::log(1.0 - p) +
                        std::pow(p, alpha) / (1.0 - p)) *
                       norm;
      }
    }
  }
  return loss;
}

BoxParamVec encode_gt_box(const GtBox& gt) {
  return {gt.box.center.x,
          gt.box.center.y,
          gt.z_center,
          std::log(gt.box.length),
          std::log(gt.box.width),
          std::log(std::max(gt.height, 1e-6)),
          std::sin(gt.box.yaw),
          std::cos(gt.box.yaw),
          gt.velocity.first,
          gt.velocity.second};
}

double l1_box_loss(const Tensor2& pred, const Tensor2& gt, Tensor2* d_pred) {
  if (!pred.same_shape(gt)) throw ShapeMismatch("l1 box shapes");
  if (d_pred) *d_pred = Tensor2(pred.rows, pred.cols);
  if (pred.rows == 0) return 0.0;
  double inv_n = 1.0 / (static_cast<double>(pred.rows) * pred.cols);
  double loss = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    double diff = pred.data[i] - gt.data[i];
    loss += std::abs(diff) * inv_n;
    if (d_pred) {
      d_pred->data[i] = diff > 0 ? inv_n : (diff < 0 ? -inv_n : 0.0);
    }
  }
  return loss;
}

SetMatchResult set_matching_loss(const SetPredictions& pred,
                                 const SetTargets& gt, const LossConfig& cfg) {
  const int q = pred.class_probs.rows;
  const int g = static_cast<int>(gt.class_ids.size());
  if (pred.box_params.rows != q || pred.box_params.cols != kBoxParamDim ||
      gt.box_params.rows != g || (g > 0 && gt.box_params.cols != kBoxParamDim)) {
    throw ShapeMismatch("set matching shapes");
  }

  SetMatchResult res;
  res.d_class_probs = Tensor2(q, pred.class_probs.cols);
  res.d_box_params = Tensor2(q, kBoxParamDim);

  if (g > 0) {
    CostMatrix cost{q, g, std::vector<double>(static_cast<size_t>(q) * g, 0.0)};
    for (int i = 0; i < q; ++i) {
      for (int j = 0; j < g; ++j) {
        double l1 = 0.0;
        for (int k = 0; k < kBoxParamDim; ++k) {
          l1 += std::abs(pred.box_params.at(i, k) - gt.box_params.at(j, k));
        }
        l1 /= kBoxParamDim;
        double cls = 1.0 - pred.class_probs.at(i, gt.class_ids[j]);
        cost.costs[static_cast<size_t>(i) * g + j] =
            cfg.match_class_weight * cls + cfg.match_l1_weight * l1;
      }
    }
    auto assignment = hungarian(cost);
    res.matches = assignment.pairs;
    res.match_cost = assignment.total_cost;
  }

  // Classification: focal over the whole (query, class) grid; matched cells
  // carry a positive target, everything else is background. Normalized by
  // the match count so positives keep weight against the background mass.
  std::vector<double> flat_pred(pred.class_probs.data.begin(), pred.class_probs.data.end());
  std::vector<double> flat_target(flat_pred.size(), 0.0);
  for (auto [qi, gi] : res.matches) {
    flat_target[static_cast<size_t>(qi) * pred.class_probs.cols + gt.class_ids[gi]] = 1.0;
  }
  for (double& p : flat_pred) p = std::clamp(p, 1e-7, 1.0 - 1e-7);
  std::vector<double> d_flat;
  res.class_loss = focal_loss(flat_pred, flat_target, cfg.focal_alpha,
                              cfg.focal_gamma, &d_flat);
  double renorm = static_cast<double>(flat_pred.size()) /
                  std::max<size_t>(1, res.matches.size());
  res.class_loss *= renorm;
  for (double& v : d_flat) v *= renorm;
  std::copy(d_flat.begin(), d_flat.end(), res.d_class_probs.data.begin());

  if (!res.matches.empty()) {
    Tensor2 matched_pred(static_cast<int>(res.matches.size()), kBoxParamDim);
    Tensor2 matched_gt(static_cast<int>(res.matches.size()), kBoxParamDim);
    for (size_t m = 0; m < res.matches.size(); ++m) {
      auto [qi, gi] = res.matches[m];
      for (int k = 0; k < kBoxParamDim; ++k) {
        matched_pred.at(static_cast<int>(m), k) = pred.box_params.at(qi, k);
        matched_gt.at(static_cast<int>(m), k) = gt.box_params.at(gi, k);
      }
    }
    Tensor2 d_matched;
    res.l1_loss = l1_box_loss(matched_pred, matched_gt, &d_matched);
    for (size_t m = 0; m < res.matches.size(); ++m) {
      auto [qi, gi] = res.matches[m];
      (void)gi;
      for (int k = 0; k < kBoxParamDim; ++k) {
        res.d_box_params.at(qi, k) = d_matched.at(static_cast<int>(m), k);
      }
    }
  }
  return res;
}

std::vector<double> relevance_targets(const std::vector<Point2>& query_xy,
                                      const std::vector<std::pair<int, int>>& matches,
                                      const std::vector<GtBox>& gts,
                                      const std::vector<char>& gt_relevant,
                                      RelevanceKind kind) {
  if (gt_relevant.size() != gts.size()) {
    throw MissingLabels("relevance flags do not cover the ground truth");
  }
  std::vector<double> targets(query_xy.size(), 0.0);
  if (kind == RelevanceKind::det) {
    for (auto [qi, gi] : matches) {
      (void)gi;
      targets[qi] = 1.0;
    }
    return targets;
  }
  // Heatmap convention: the matched query is the peak (exact 1, so the
  // positive branch of the focal loss fires); other queries see a Gaussian
  // of their distance to the relevant gt center.
  for (auto [qi, gi] : matches) {
    if (!gt_relevant[gi]) continue;
    const GtBox& gt = gts[gi];
    double sigma = 0.5 * std::hypot(gt.box.length, gt.box.width);
    for (size_t j = 0; j < query_xy.size(); ++j) {
      double d = norm(query_xy[j] - gt.box.center);
      double g = std::exp(-d * d / (2.0 * sigma * sigma));
      targets[j] = std::max(targets[j], g);
    }
    targets[qi] = 1.0;
  }
  return targets;
}

LossBreakdown joint_loss(const JointLossParts& parts, const LossConfig& cfg) {
  if (parts.rel_embedding_grad_present) {
    throw CheckFailure("relevance loss must not carry an embedding gradient");
  }
  LossBreakdown out;
  out.det_class = parts.det_class;
  out.det_l1 = parts.det_l1;
  out.rel = parts.rel;
  out.aux = parts.aux;
  out.total = out.det_class + out.det_l1 + cfg.lambda_rel * out.rel +
              cfg.lambda_aux * out.aux;
  return out;
}

}  // namespace store3d
