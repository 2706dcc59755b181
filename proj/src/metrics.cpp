#include "store3d/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "store3d/assignment.hpp"

namespace store3d {

void MetricsConfig::validate() const {
  if (center_thresholds.empty()) throw ConfigError("need center thresholds");
  double prev = 0.0;
  for (double t : center_thresholds) {
    if (!(t > prev)) throw ConfigError("thresholds must be positive ascending");
    prev = t;
  }
  if (!(ra_radius > 0)) throw ConfigError("ra_radius must be positive");
  if (classes.empty()) throw ConfigError("class list must not be empty");
}

namespace {

struct ClassMatchOutput {
  // (score, is_tp) sorted by descending score, deterministic tie-break.
  std::vector<std::pair<double, bool>> scored;
  std::vector<MatchedPair> matches;
  int npos = 0;
};

ClassMatchOutput match_class(const std::vector<FrameEvalData>& frames,
                             const std::string& class_name, double threshold) {
  ClassMatchOutput out;
  struct Entry {
    double score;
    int frame;
    int det;
    bool tp;
  };
  std::vector<Entry> entries;
  for (size_t f = 0; f < frames.size(); ++f) {
    const auto& frame = frames[f];
    std::vector<ScoredPoint> dets;
    std::vector<int> det_rows;
    for (size_t i = 0; i < frame.dets.size(); ++i) {
      if (frame.dets[i].class_name != class_name) continue;
      dets.push_back({frame.dets[i].box.center, frame.dets[i].score, class_name});
      det_rows.push_back(static_cast<int>(i));
    }
    std::vector<GtPoint> gts;
    std::vector<int> gt_rows;
    for (size_t i = 0; i < frame.gts.size(); ++i) {
      if (frame.gts[i].class_name != class_name) continue;
      gts.push_back({frame.gts[i].box.center, class_name});
      gt_rows.push_back(static_cast<int>(i));
    }
    out.npos += static_cast<int>(gts.size());

    auto pairs = greedy_match(dets, gts, threshold);
    std::vector<char> tp_flags(dets.size(), 0);
    for (auto [di, gi] : pairs) {
      tp_flags[di] = 1;
      out.matches.push_back({&frame.dets[det_rows[di]], &frame.gts[gt_rows[gi]]});
    }
    for (size_t i = 0; i < dets.size(); ++i) {
      entries.push_back({dets[i].score, static_cast<int>(f),
                         det_rows[static_cast<size_t>(i)], tp_flags[i] != 0});
    }
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.det < b.det;
  });
  out.scored.reserve(entries.size());
  for (const auto& e : entries) out.scored.emplace_back(e.score, e.tp);
  return out;
}

// 101-point interpolated AP with recall/precision floors, following the
// published benchmark formula (precision clipped at the floor, recall
// integrated above the floor, normalized so a perfect curve scores 1).
double calc_ap(const std::vector<std::pair<double, bool>>& scored, int npos,
               double min_recall, double min_precision) {
  if (npos <= 0) throw NoGroundTruth("AP undefined without ground truth");
  if (scored.empty()) return 0.0;

  std::vector<double> rec, prec;
  int tp = 0, fp = 0;
  rec.reserve(scored.size());
  prec.reserve(scored.size());
  for (const auto& [score, is_tp] : scored) {
    if (is_tp) ++tp;
    else ++fp;
    rec.push_back(static_cast<double>(tp) / npos);
    prec.push_back(static_cast<double>(tp) / (tp + fp));
  }

  auto interp = [&](double r) {
    if (r <= rec.front()) return prec.front();
    if (r > rec.back()) return 0.0;
    auto it = std::lower_bound(rec.begin(), rec.end(), r);
    size_t hi = static_cast<size_t>(it - rec.begin());
    if (rec[hi] == r) return prec[hi];
    size_t lo = hi - 1;
    double f = (r - rec[lo]) / (rec[hi] - rec[lo]);
    return prec[lo] + f * (prec[hi] - prec[lo]);
  };

  int start = static_cast<int>(std::lround(100.0 * min_recall)) + 1;
  double acc = 0.0;
  int count = 0;
  for (int j = start; j <= 100; ++j) {
    double p = interp(j / 100.0);
    acc += std::max(0.0, p - min_precision) / (1.0 - min_precision);
    ++count;
  }
  return count > 0 ? acc / count : 0.0;
}

double iou_aligned(double l1, double w1, double h1, double l2, double w2,
                   double h2) {
  double inter = std::min(l1, l2) * std::min(w1, w2) * std::min(h1, h2);
  double uni = l1 * w1 * h1 + l2 * w2 * h2 - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::array<bool, 5> included_terms(const MetricsConfig& cfg) {
  return {true, true, true, cfg.include_velocity, cfg.include_attribute};
}

VariantResult evaluate_variant(const std::vector<FrameEvalData>& frames,
                               const MetricsConfig& cfg) {
  VariantResult res;
  double ap_sum = 0.0;
  int ap_count = 0;
  double err_sum[5] = {0, 0, 0, 0, 0};
  int err_classes = 0;

  for (const auto& cls : cfg.classes) {
    int npos = 0;
    for (const auto& f : frames) {
      for (const auto& g : f.gts) {
        if (g.class_name == cls) ++npos;
      }
    }
    if (npos == 0) continue;  // class excluded from the mean

    ClassResult cr;
    cr.gt = npos;
    for (double threshold : cfg.center_thresholds) {
      auto matched = match_class(frames, cls, threshold);
      double ap = calc_ap(matched.scored, matched.npos, cfg.min_recall,
                          cfg.min_precision);
      cr.ap_by_threshold[threshold] = ap;
      ap_sum += ap;
      ++ap_count;
      if (threshold == cfg.tp_error_threshold) {
        cr.errors = tp_errors(matched.matches);
        cr.tp = static_cast<int>(matched.matches.size());
        cr.fp = static_cast<int>(matched.scored.size()) - cr.tp;
      }
    }
    err_sum[0] += cr.errors.ate;
    err_sum[1] += cr.errors.ase;
    err_sum[2] += cr.errors.aoe;
    err_sum[3] += cr.errors.ave;
    err_sum[4] += cr.errors.aae;
    ++err_classes;
    res.tp += cr.tp;
    res.fp += cr.fp;
    res.gt += cr.gt;
    res.per_class[cls] = std::move(cr);
  }

  res.mean_ap = ap_count > 0 ? ap_sum / ap_count : 0.0;
  if (err_classes > 0) {
    res.mean_errors = {err_sum[0] / err_classes, err_sum[1] / err_classes,
                       err_sum[2] / err_classes, err_sum[3] / err_classes,
                       err_sum[4] / err_classes};
  }
  res.nds = nds(res.mean_ap, res.mean_errors, included_terms(cfg));
  return res;
}

}  // namespace

double average_precision(const std::vector<FrameEvalData>& frames,
                         const std::string& class_name, double threshold,
                         const MetricsConfig& cfg) {
  auto matched = match_class(frames, class_name, threshold);
  return calc_ap(matched.scored, matched.npos, cfg.min_recall, cfg.min_precision);
}

TpErrors tp_errors(const std::vector<MatchedPair>& matches) {
  TpErrors e;  // defaults to 1.0 each
  if (matches.empty()) return e;
  double ate = 0, ase = 0, aoe = 0, ave = 0;
  int attr_correct = 0;
  for (const auto& m : matches) {
    ate += norm(m.det->box.center - m.gt->box.center);
    ase += 1.0 - iou_aligned(m.det->box.length, m.det->box.width, m.det->height,
                             m.gt->box.length, m.gt->box.width, m.gt->height);
    aoe += std::abs(wrap_angle(m.det->box.yaw - m.gt->box.yaw));
    ave += std::hypot(m.det->velocity.first - m.gt->velocity.first,
                      m.det->velocity.second - m.gt->velocity.second);
    if (m.det->attribute == m.gt->attribute) ++attr_correct;
  }
  double n = static_cast<double>(matches.size());
  e.ate = ate / n;
  e.ase = ase / n;
  e.aoe = aoe / n;
  e.ave = ave / n;
  e.aae = 1.0 - attr_correct / n;
  return e;
}

double nds(double mean_ap, const TpErrors& errors,
           const std::array<bool, 5>& included) {
  const double errs[5] = {errors.ate, errors.ase, errors.aoe, errors.ave,
                          errors.aae};
  double score = 5.0 * mean_ap;
  double denom = 5.0;
  for (int i = 0; i < 5; ++i) {
    if (!included[i]) continue;
    score += 1.0 - std::min(1.0, errs[i]);
    denom += 1.0;
  }
  return score / denom;
}

void apply_ra_filter(FrameEvalData& frame, double ra_radius) {
  auto within = [&](Point2 c) { return norm(c - frame.ego_center) <= ra_radius; };
  std::erase_if(frame.gts, [&](const GtBox& g) { return !within(g.box.center); });
  std::erase_if(frame.dets, [&](const Detection& d) { return !within(d.box.center); });
}

void apply_rm_filter(FrameEvalData& frame, double max_threshold) {
  for (const auto& g : frame.gts) {
    if (!frame.labels.count(g.agent_id)) {
      throw MissingLabels("gt agent '" + g.agent_id + "' has no relevance label");
    }
  }
  // Detections matched to an irrelevant gt contribute neither TP nor FP.
  std::vector<ScoredPoint> dets;
  for (const auto& d : frame.dets) {
    dets.push_back({d.box.center, d.score, d.class_name});
  }
  std::vector<GtPoint> gts;
  for (const auto& g : frame.gts) {
    gts.push_back({g.box.center, g.class_name});
  }
  auto pairs = greedy_match(dets, gts, max_threshold);
  std::vector<char> drop(frame.dets.size(), 0);
  for (auto [di, gi] : pairs) {
    if (!frame.labels.at(frame.gts[gi].agent_id).relevant) drop[di] = 1;
  }
  size_t w = 0;
  for (size_t i = 0; i < frame.dets.size(); ++i) {
    if (!drop[i]) frame.dets[w++] = frame.dets[i];
  }
  frame.dets.resize(w);
  std::erase_if(frame.gts, [&](const GtBox& g) {
    return !frame.labels.at(g.agent_id).relevant;
  });
}

MetricsReport evaluate(const std::vector<FrameEvalData>& frames,
                       const MetricsConfig& cfg) {
  cfg.validate();
  MetricsReport report;
  report.standard = evaluate_variant(frames, cfg);

  std::vector<FrameEvalData> ra_frames = frames;
  for (auto& f : ra_frames) apply_ra_filter(f, cfg.ra_radius);
  report.ra = evaluate_variant(ra_frames, cfg);

  std::vector<FrameEvalData> rm_frames = frames;
  for (auto& f : rm_frames) apply_rm_filter(f, cfg.center_thresholds.back());
  report.rm = evaluate_variant(rm_frames, cfg);

  report.map = report.standard.mean_ap;
  report.nds = report.standard.nds;
  report.map_ra = report.ra.mean_ap;
  report.nds_ra = report.ra.nds;
  report.nds_rm = report.rm.nds;

  report.metadata["ap_formula"] =
      "101pt-interp; recall floor 0.1; precision floor 0.1; norm 0.81";
  report.metadata["rm_fn_policy"] = "discard-irrelevant-matches";
  report.metadata["tp_error_threshold"] = "2.0";
  if (!cfg.include_velocity || !cfg.include_attribute) {
    report.metadata["nds_renormalized"] = "true";
  }
  return report;
}

std::vector<FrameEvalData> build_eval_frames(
    const SceneDataset& dataset, const std::vector<FrameLabels>& labels,
    const std::vector<Detection>& detections) {
  std::map<std::string, const FrameLabels*> labels_by_frame;
  for (const auto& fl : labels) labels_by_frame[fl.frame_id] = &fl;
  std::map<std::string, std::vector<Detection>> dets_by_frame;
  for (const auto& d : detections) dets_by_frame[d.frame_id].push_back(d);

  std::vector<FrameEvalData> out;
  for (const auto& scene : dataset.scenes) {
    for (const auto& frame : scene.frames) {
      FrameEvalData fed;
      fed.frame_id = frame.frame_id;
      fed.ego_center = track_box_at(scene.ego, frame.timestamp).center;
      fed.gts = frame_ground_truth(scene, frame);
      auto dit = dets_by_frame.find(frame.frame_id);
      if (dit != dets_by_frame.end()) fed.dets = dit->second;
      auto lit = labels_by_frame.find(frame.frame_id);
      if (lit != labels_by_frame.end()) {
        for (const auto& label : lit->second->labels) {
          fed.labels[label.agent_id] = label;
        }
      }
      out.push_back(std::move(fed));
    }
  }
  return out;
}

}  // namespace store3d
