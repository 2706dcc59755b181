#include "store3d/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "store3d/rng.hpp"

namespace store3d {

// ---------------------------------------------------------------------------
// Schedules

double layer_keep_ratio(double tkr, int layer, int total_layers) {
  if (!(tkr > 0) || tkr > 1.0) throw ConfigError("TKR must lie in (0, 1]");
  if (layer < 0 || layer > total_layers) throw ConfigError("layer outside [0, L]");
  double frac = 1.0 - static_cast<double>(layer) / total_layers;
  return tkr + (1.0 - tkr) * frac * frac;
}

double training_keep_ratio(int iter, int warmup_start, int warmup_end,
                           double tkr) {
  if (warmup_start > warmup_end) throw ConfigError("warmup start > end");
  if (iter <= warmup_start) return 1.0;
  if (iter >= warmup_end) return tkr;
  double f = static_cast<double>(iter - warmup_start) / (warmup_end - warmup_start);
  return 1.0 + f * (tkr - 1.0);
}

void ScheduleConfig::validate() const {
  if (!(tkr > 0) || tkr > 1.0) throw ConfigError("TKR must lie in (0, 1]");
  if (warmup_start > warmup_end) throw ConfigError("warmup start > end");
  auto check_stream = [](const std::vector<int>& layers, int react, int total,
                         const char* what) {
    if (react < 1 || react > total) {
      throw ConfigError(std::string(what) + " reactivation layer outside [1, L]");
    }
    int prev = 0;
    for (int l : layers) {
      if (l <= prev) throw ConfigError(std::string(what) + " prune layers not ascending");
      if (l >= react) throw ConfigError(std::string(what) + " prune layer >= reactivation");
      prev = l;
    }
  };
  check_stream(token_prune_layers, token_reactivation_layer, backbone_layers, "token");
  check_stream(query_prune_layers, query_reactivation_layer, decoder_layers, "query");
  for (const auto& o : {rho_img_override, rho_qry_override}) {
    if (o && (!(*o > 0) || *o > 1.0)) throw ConfigError("stream override outside (0, 1]");
  }
}

double ScheduleConfig::token_ratio_at(int layer, double effective_tkr) const {
  if (layer == token_reactivation_layer) return 1.0;
  if (rho_img_override) return *rho_img_override;
  return layer_keep_ratio(effective_tkr, layer, backbone_layers);
}

double ScheduleConfig::query_ratio_at(int layer, double effective_tkr) const {
  if (layer == query_reactivation_layer) return 1.0;
  if (rho_qry_override) return *rho_qry_override;
  return layer_keep_ratio(effective_tkr, layer, decoder_layers);
}

// ---------------------------------------------------------------------------
// Routing primitives

namespace {

void split_rows(int rows, std::span<const double> scores, int keep_count,
                const GumbelTopkConfig& cfg, std::vector<int>* kept,
                std::vector<int>* dropped) {
  if (static_cast<int>(scores.size()) != rows) {
    throw ShapeMismatch("scores not aligned to stream rows");
  }
  GumbelTopkConfig local = cfg;
  local.k = keep_count;
  auto res = gumbel_topk(scores, local);
  *kept = res.kept;  // ascending
  dropped->clear();
  std::vector<char> is_kept(rows, 0);
  for (int i : *kept) is_kept[i] = 1;
  for (int i = 0; i < rows; ++i) {
    if (!is_kept[i]) dropped->push_back(i);
  }
}

}  // namespace

void select_and_store(TokenStream& stream, std::span<const double> scores,
                      int keep_count, const GumbelTopkConfig& cfg,
                      StorageBuffer& buffer, int stage) {
  std::vector<int> kept, dropped;
  split_rows(stream.embeddings.rows, scores, keep_count, cfg, &kept, &dropped);

  for (int r : dropped) {
    BufferEntry e;
    e.original_index = stream.original_index[r];
    auto row = stream.embeddings.row(r);
    e.embedding.assign(row.begin(), row.end());
    e.stage_written = stage;
    buffer.entries.push_back(std::move(e));
  }

  Tensor2 next(static_cast<int>(kept.size()), stream.embeddings.cols);
  std::vector<int> next_index(kept.size());
  for (size_t i = 0; i < kept.size(); ++i) {
    auto src = stream.embeddings.row(kept[i]);
    std::copy(src.begin(), src.end(), next.row(static_cast<int>(i)).begin());
    next_index[i] = stream.original_index[kept[i]];
  }
  stream.embeddings = std::move(next);
  stream.original_index = std::move(next_index);
}

void select_and_store(QuerySet& stream, std::span<const double> scores,
                      int keep_count, const GumbelTopkConfig& cfg,
                      StorageBuffer& buffer, int stage) {
  std::vector<int> kept, dropped;
  split_rows(stream.embeddings.rows, scores, keep_count, cfg, &kept, &dropped);

  for (int r : dropped) {
    BufferEntry e;
    e.original_index = stream.original_index[r];
    auto row = stream.embeddings.row(r);
    e.embedding.assign(row.begin(), row.end());
    e.stage_written = stage;
    e.reference_point = stream.reference_points[r];
    e.propagated = stream.propagated[r];
    buffer.entries.push_back(std::move(e));
  }

  Tensor2 next(static_cast<int>(kept.size()), stream.embeddings.cols);
  std::vector<std::array<double, 3>> next_ref(kept.size());
  std::vector<int> next_index(kept.size());
  std::vector<char> next_prop(kept.size());
  for (size_t i = 0; i < kept.size(); ++i) {
    auto src = stream.embeddings.row(kept[i]);
    std::copy(src.begin(), src.end(), next.row(static_cast<int>(i)).begin());
    next_ref[i] = stream.reference_points[kept[i]];
    next_index[i] = stream.original_index[kept[i]];
    next_prop[i] = stream.propagated[kept[i]];
  }
  stream.embeddings = std::move(next);
  stream.reference_points = std::move(next_ref);
  stream.original_index = std::move(next_index);
  stream.propagated = std::move(next_prop);
}

namespace {

void check_disjoint_and_sorted(const std::vector<int>& ids, const char* what) {
  for (size_t i = 1; i < ids.size(); ++i) {
    if (ids[i] <= ids[i - 1]) throw IndexCollision(what);
  }
}

}  // namespace

void reactivate(TokenStream& stream, StorageBuffer& buffer) {
  int total = stream.embeddings.rows + static_cast<int>(buffer.entries.size());
  std::vector<std::pair<int, int>> order;  // (original index, source row / ~buffer idx)
  order.reserve(total);
  for (int r = 0; r < stream.embeddings.rows; ++r) {
    order.emplace_back(stream.original_index[r], r);
  }
  for (size_t b = 0; b < buffer.entries.size(); ++b) {
    order.emplace_back(buffer.entries[b].original_index, ~static_cast<int>(b));
  }
  std::sort(order.begin(), order.end());
  std::vector<int> ids;
  ids.reserve(total);
  for (auto& [id, src] : order) ids.push_back(id);
  check_disjoint_and_sorted(ids, "token reactivation index collision");

  Tensor2 merged(total, stream.embeddings.cols);
  for (int i = 0; i < total; ++i) {
    int src = order[i].second;
    if (src >= 0) {
      auto row = stream.embeddings.row(src);
      std::copy(row.begin(), row.end(), merged.row(i).begin());
    } else {
      const auto& e = buffer.entries[~src];
      std::copy(e.embedding.begin(), e.embedding.end(), merged.row(i).begin());
    }
  }
  stream.embeddings = std::move(merged);
  stream.original_index = std::move(ids);
  buffer.entries.clear();
}

void reactivate(QuerySet& stream, StorageBuffer& buffer) {
  int total = stream.embeddings.rows + static_cast<int>(buffer.entries.size());
  std::vector<std::pair<int, int>> order;
  order.reserve(total);
  for (int r = 0; r < stream.embeddings.rows; ++r) {
    order.emplace_back(stream.original_index[r], r);
  }
  for (size_t b = 0; b < buffer.entries.size(); ++b) {
    order.emplace_back(buffer.entries[b].original_index, ~static_cast<int>(b));
  }
  std::sort(order.begin(), order.end());
  std::vector<int> ids;
  for (auto& [id, src] : order) ids.push_back(id);
  check_disjoint_and_sorted(ids, "query reactivation index collision");

  Tensor2 merged(total, stream.embeddings.cols);
  std::vector<std::array<double, 3>> refs(total);
  std::vector<char> props(total);
  for (int i = 0; i < total; ++i) {
    int src = order[i].second;
    if (src >= 0) {
      auto row = stream.embeddings.row(src);
      std::copy(row.begin(), row.end(), merged.row(i).begin());
      refs[i] = stream.reference_points[src];
      props[i] = stream.propagated[src];
    } else {
      const auto& e = buffer.entries[~src];
      std::copy(e.embedding.begin(), e.embedding.end(), merged.row(i).begin());
      refs[i] = e.reference_point;
      props[i] = e.propagated;
    }
  }
  stream.embeddings = std::move(merged);
  stream.reference_points = std::move(refs);
  stream.original_index = std::move(ids);
  stream.propagated = std::move(props);
  buffer.entries.clear();
}

// ---------------------------------------------------------------------------
// Model

void ModelConfig::validate() const {
  if (views < 1 || grid_h < 1 || grid_w < 1) throw ConfigError("bad grid");
  if (embed_dim % heads != 0) throw ConfigError("embed_dim not divisible by heads");
  if (grid_h % window != 0 || grid_w % window != 0) {
    throw ConfigError("grid must be divisible by the window size");
  }
  if (backbone_layout.empty()) throw ConfigError("empty backbone layout");
  for (char c : backbone_layout) {
    if (c != 'w' && c != 'g') throw ConfigError("backbone layout must be 'w'/'g'");
  }
  if (decoder_layers < 1) throw ConfigError("decoder needs >= 1 layer");
  if (num_anchor_queries < 1) throw ConfigError("need >= 1 anchor query");
  if (fpn_levels < 1) throw ConfigError("need >= 1 pyramid level");
  if (!(relevance_topk_frac > 0) || relevance_topk_frac > 1) {
    throw ConfigError("relevance_topk_frac outside (0, 1]");
  }
  if (classes.empty()) throw ConfigError("class list must not be empty");
}

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(mix64(seed, 0x900de1));
  ModelParams p;

  auto rand_mat = [&rng](int rows, int cols, double scale) {
    Tensor2 t(rows, cols);
    for (double& v : t.data) v = scale * rng.normal();
    return t;
  };

  int d = cfg.embed_dim;
  p.patch_embed = rand_mat(d, cfg.input_channels, 1.0 / std::sqrt(cfg.input_channels));
  p.patch_bias.assign(d, 0.0);

  for (size_t l = 0; l < cfg.backbone_layout.size(); ++l) {
    p.backbone.push_back(make_transformer_block(d, cfg.heads, mix64(seed, 0xbb, l)));
  }
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    DecoderLayerParams layer;
    layer.attn_mlp = make_transformer_block(d, cfg.heads, mix64(seed, 0xdd, l));
    layer.deform = make_deformable(d, cfg.fpn_levels, cfg.deform_points,
                                   mix64(seed, 0xde, l));
    p.decoder.push_back(std::move(layer));
  }

  int pe_dim = positional_encoding_dim(cfg.pe_freqs);
  std::vector<int> init_dims{pe_dim, d, d};
  p.init_mlp = make_mlp(init_dims, mix64(seed, 0x111), 1.0);

  int plan_in = 2 * d + cfg.ego_embed_dim;
  std::vector<int> plan_dims{plan_in, cfg.head_hidden, cfg.head_hidden};
  p.rel_head_plan = make_mlp(plan_dims, mix64(seed, 0x222), 1.0, true);

  std::vector<int> det_dims{2 * d, cfg.head_hidden, cfg.head_hidden};
  p.rel_head_det = make_mlp(det_dims, mix64(seed, 0x333), 1.0, true);

  std::vector<int> ego_dims{3, cfg.ego_embed_dim, cfg.ego_embed_dim};
  p.ego_mlp = make_mlp(ego_dims, mix64(seed, 0x444), 1.0);

  p.rel_deform = make_deformable(d, cfg.fpn_levels, cfg.deform_points,
                                 mix64(seed, 0x555));

  int c = static_cast<int>(cfg.classes.size());
  p.cls_head = rand_mat(c, d, 0.3 / std::sqrt(d));
  p.cls_bias.assign(c, -2.0);  // start detections at low confidence
  p.box_head = rand_mat(kBoxParamDim, d, 0.1 / std::sqrt(d));
  p.box_bias.assign(kBoxParamDim, 0.0);
  p.aux_head = rand_mat(3, d, 0.3 / std::sqrt(d));
  p.aux_bias.assign(3, 0.0);
  p.aux_bias[0] = -2.0;
  return p;
}

// ---------------------------------------------------------------------------
// Query construction

std::vector<std::array<double, 3>> make_anchor_points(const ModelConfig& cfg) {
  int n = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.num_anchor_queries))));
  double extent = 0.85 * cfg.bev_range;
  std::vector<std::array<double, 3>> anchors;
  for (int r = 0; r < n && static_cast<int>(anchors.size()) < cfg.num_anchor_queries; ++r) {
    for (int c = 0; c < n && static_cast<int>(anchors.size()) < cfg.num_anchor_queries; ++c) {
      double x = n > 1 ? -extent + 2.0 * extent * r / (n - 1) : 0.0;
      double y = n > 1 ? -extent + 2.0 * extent * c / (n - 1) : 0.0;
      anchors.push_back({x, y, 0.75});
    }
  }
  return anchors;
}

std::vector<std::array<double, 3>> make_reserve_points(const ModelConfig& cfg) {
  // First-frame substitutes for propagated queries: a ring inside the grid.
  std::vector<std::array<double, 3>> pts;
  double radius = 0.4 * cfg.bev_range;
  int n = std::max(1, cfg.num_propagated);
  for (int i = 0; i < n; ++i) {
    double a = 2.0 * kPi * i / n;
    pts.push_back({radius * std::cos(a), radius * std::sin(a), 0.75});
  }
  return pts;
}

QuerySet init_queries(const std::vector<std::array<double, 3>>& anchors,
                      const MlpParams& init_mlp, int pe_freqs) {
  for (const auto& a : anchors) {
    if (!std::isfinite(a[0]) || !std::isfinite(a[1]) || !std::isfinite(a[2])) {
      throw DomainError("non-finite anchor");
    }
  }
  QuerySet qs;
  int q = static_cast<int>(anchors.size());
  int d = init_mlp.output_dim();
  qs.embeddings = Tensor2(q, d);
  qs.reference_points = anchors;
  qs.original_index.resize(q);
  qs.propagated.assign(q, 0);
  for (int i = 0; i < q; ++i) {
    auto pe = positional_encoding(anchors[i][0], anchors[i][1], anchors[i][2], pe_freqs);
    auto emb = mlp_forward(init_mlp, pe);
    std::copy(emb.begin(), emb.end(), qs.embeddings.row(i).begin());
    qs.original_index[i] = i;
  }
  return qs;
}

QuerySet propagate_queries(const QuerySet& prev_topk, const SE2Pose& ego_motion) {
  QuerySet out = prev_topk;
  for (auto& ref : out.reference_points) {
    Point2 p = ego_motion.apply({ref[0], ref[1]});
    ref[0] = p.x;
    ref[1] = p.y;
  }
  std::fill(out.propagated.begin(), out.propagated.end(), 1);
  std::iota(out.original_index.begin(), out.original_index.end(), 0);
  return out;
}

QuerySet concat_queries(const QuerySet& a, const QuerySet& b) {
  if (a.embeddings.rows > 0 && b.embeddings.rows > 0 &&
      a.embeddings.cols != b.embeddings.cols) {
    throw ShapeMismatch("query embedding dims");
  }
  QuerySet out;
  int total = a.embeddings.rows + b.embeddings.rows;
  int d = a.embeddings.rows > 0 ? a.embeddings.cols : b.embeddings.cols;
  out.embeddings = Tensor2(total, d);
  out.reference_points.resize(total);
  out.original_index.resize(total);
  out.propagated.resize(total);
  for (int i = 0; i < a.embeddings.rows; ++i) {
    auto src = a.embeddings.row(i);
    std::copy(src.begin(), src.end(), out.embeddings.row(i).begin());
    out.reference_points[i] = a.reference_points[i];
    out.propagated[i] = a.propagated[i];
  }
  for (int i = 0; i < b.embeddings.rows; ++i) {
    int r = a.embeddings.rows + i;
    auto src = b.embeddings.row(i);
    std::copy(src.begin(), src.end(), out.embeddings.row(r).begin());
    out.reference_points[r] = b.reference_points[i];
    out.propagated[r] = b.propagated[i];
  }
  std::iota(out.original_index.begin(), out.original_index.end(), 0);
  return out;
}

// ---------------------------------------------------------------------------
// Relevance prediction

ViewPoint project_to_view(Point2 ego_xy, int views, double bev_range) {
  double theta = std::atan2(ego_xy.y, ego_xy.x);  // [-pi, pi]
  double slice = 2.0 * kPi / views;
  double raw = (theta + kPi) / slice;
  int view = std::clamp(static_cast<int>(raw), 0, views - 1);
  double u = std::clamp(raw - view, 0.0, 1.0);
  double r = norm(ego_xy);
  double v = std::clamp(r / bev_range, 0.0, 1.0);
  return {view, u, v};
}

ViewPyramid build_pyramid(const Tensor2& view_tokens, int grid_h, int grid_w,
                          int levels) {
  if (view_tokens.rows != grid_h * grid_w) throw ShapeMismatch("pyramid base grid");
  ViewPyramid pyr;
  pyr.levels.push_back(view_tokens);
  pyr.dims.emplace_back(grid_h, grid_w);
  for (int l = 1; l < levels; ++l) {
    const Tensor2& prev = pyr.levels.back();
    auto [ph, pw] = pyr.dims.back();
    int nh = std::max(1, ph / 2), nw = std::max(1, pw / 2);
    Tensor2 pooled(nh * nw, prev.cols);
    for (int r = 0; r < nh; ++r) {
      for (int c = 0; c < nw; ++c) {
        int count = 0;
        auto dst = pooled.row(r * nw + c);
        for (int dr = 0; dr < 2; ++dr) {
          for (int dc = 0; dc < 2; ++dc) {
            int sr = 2 * r + dr, sc = 2 * c + dc;
            if (sr >= ph || sc >= pw) continue;
            auto src = prev.row(sr * pw + sc);
            for (int ch = 0; ch < prev.cols; ++ch) dst[ch] += src[ch];
            ++count;
          }
        }
        for (int ch = 0; ch < prev.cols; ++ch) dst[ch] /= count;
      }
    }
    pyr.levels.push_back(std::move(pooled));
    pyr.dims.emplace_back(nh, nw);
  }
  return pyr;
}

namespace {

struct HeadInputBundle {
  Tensor2 inputs;      // Q x in_dim
  Tensor2 footprints;  // Q x (views * h0 * w0)
  std::vector<int> query_view;
};

HeadInputBundle build_head_inputs(const QuerySet& queries,
                                  const std::vector<ViewPyramid>& pyramids,
                                  const DeformableParams& deform,
                                  std::span<const double> ego_embedding,
                                  RelevanceKind kind, const ModelConfig& cfg) {
  if (kind == RelevanceKind::plan && ego_embedding.empty()) {
    throw ShapeMismatch("plan relevance requires an ego embedding");
  }
  int q = queries.embeddings.rows;
  int d = queries.embeddings.cols;
  auto [h0, w0] = pyramids.front().dims.front();
  int per_view = h0 * w0;
  int in_dim = 2 * d + (kind == RelevanceKind::plan
                            ? static_cast<int>(ego_embedding.size())
                            : 0);

  HeadInputBundle res;
  res.inputs = Tensor2(q, in_dim);
  res.footprints = Tensor2(q, static_cast<int>(pyramids.size()) * per_view);
  res.query_view.resize(q);

  for (int j = 0; j < q; ++j) {
    const auto& ref = queries.reference_points[j];
    ViewPoint vp = project_to_view({ref[0], ref[1]},
                                   static_cast<int>(pyramids.size()), cfg.bev_range);
    res.query_view[j] = vp.view;
    const ViewPyramid& pyr = pyramids[vp.view];
    std::vector<FeatureLevel> levels;
    for (size_t l = 0; l < pyr.levels.size(); ++l) {
      levels.push_back({&pyr.levels[l], pyr.dims[l].first, pyr.dims[l].second});
    }
    auto dres = deformable_cross_attention(queries.embeddings.row(j), vp.u, vp.v,
                                           levels, deform);

    auto irow = res.inputs.row(j);
    auto qrow = queries.embeddings.row(j);
    std::copy(qrow.begin(), qrow.end(), irow.begin());
    std::copy(dres.context.begin(), dres.context.end(), irow.begin() + d);
    if (kind == RelevanceKind::plan) {
      std::copy(ego_embedding.begin(), ego_embedding.end(), irow.begin() + 2 * d);
    }
    // Normalize the concatenated input; deep-layer embeddings otherwise
    // saturate the head sigmoid.
    double mean = 0.0;
    for (double v : irow) mean += v;
    mean /= in_dim;
    double var = 0.0;
    for (double v : irow) var += (v - mean) * (v - mean);
    var /= in_dim;
    double inv = 1.0 / std::sqrt(var + 1e-6);
    for (double& v : irow) v = (v - mean) * inv;

    double* frow = res.footprints.data.data() +
                   static_cast<size_t>(j) * res.footprints.cols;
    for (int cell = 0; cell < per_view; ++cell) {
      frow[vp.view * per_view + cell] = dres.footprint[cell];
    }
  }
  return res;
}

}  // namespace

Tensor2 relevance_head_inputs(const QuerySet& queries,
                              const std::vector<ViewPyramid>& pyramids,
                              const DeformableParams& deform,
                              std::span<const double> ego_embedding,
                              RelevanceKind kind, const ModelConfig& cfg) {
  return build_head_inputs(queries, pyramids, deform, ego_embedding, kind, cfg)
      .inputs;
}

QueryRelevanceResult query_relevance(const QuerySet& queries,
                                     const std::vector<ViewPyramid>& pyramids,
                                     const MlpParams& head,
                                     const DeformableParams& deform,
                                     std::span<const double> ego_embedding,
                                     RelevanceKind kind, const ModelConfig& cfg) {
  auto bundle = build_head_inputs(queries, pyramids, deform, ego_embedding, kind, cfg);
  QueryRelevanceResult res;
  res.scores.kind = kind;
  res.scores.scores.resize(bundle.inputs.rows);
  for (int j = 0; j < bundle.inputs.rows; ++j) {
    res.scores.scores[j] = relevance_head_score(head, bundle.inputs.row(j));
  }
  res.footprints = std::move(bundle.footprints);
  res.query_view = std::move(bundle.query_view);
  return res;
}

std::vector<double> token_relevance(const Tensor2& topk_footprints) {
  if (topk_footprints.rows == 0) throw EmptyTopK("no top-K query footprints");
  std::vector<double> out(topk_footprints.cols, 0.0);
  for (int r = 0; r < topk_footprints.rows; ++r) {
    auto row = topk_footprints.row(r);
    for (int c = 0; c < topk_footprints.cols; ++c) out[c] += row[c];
  }
  for (double& v : out) v /= topk_footprints.rows;
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct CoordTable {
  int views, grid_h, grid_w;
  TokenCoord coord(int id) const {
    int per_view = grid_h * grid_w;
    int view = id / per_view;
    int cell = id % per_view;
    return {view, cell / grid_w, cell % grid_w};
  }
};

// Token grids rebuilt from the active stream; pruned cells read as zero.
std::vector<Tensor2> snapshot_views(const TokenStream& stream, const CoordTable& tbl,
                                    int dim) {
  std::vector<Tensor2> views(tbl.views, Tensor2(tbl.grid_h * tbl.grid_w, dim));
  for (int r = 0; r < stream.embeddings.rows; ++r) {
    int id = stream.original_index[r];
    TokenCoord c = tbl.coord(id);
    auto src = stream.embeddings.row(r);
    std::copy(src.begin(), src.end(),
              views[c.view].row(c.row * tbl.grid_w + c.col).begin());
  }
  return views;
}

std::vector<ViewPyramid> snapshot_pyramids(const TokenStream& stream,
                                           const CoordTable& tbl, int dim,
                                           int levels) {
  auto views = snapshot_views(stream, tbl, dim);
  std::vector<ViewPyramid> pyrs;
  pyrs.reserve(views.size());
  for (auto& v : views) {
    pyrs.push_back(build_pyramid(v, tbl.grid_h, tbl.grid_w, levels));
  }
  return pyrs;
}

std::vector<std::vector<int>> window_groups(const TokenStream& stream,
                                            const CoordTable& tbl, int window) {
  std::map<std::tuple<int, int, int>, std::vector<int>> by_block;
  for (int r = 0; r < stream.embeddings.rows; ++r) {
    TokenCoord c = tbl.coord(stream.original_index[r]);
    by_block[{c.view, c.row / window, c.col / window}].push_back(r);
  }
  std::vector<std::vector<int>> groups;
  groups.reserve(by_block.size());
  for (auto& [key, rows] : by_block) groups.push_back(std::move(rows));
  return groups;
}

std::vector<std::vector<int>> view_groups(const TokenStream& stream,
                                          const CoordTable& tbl) {
  std::map<int, std::vector<int>> by_view;
  for (int r = 0; r < stream.embeddings.rows; ++r) {
    by_view[tbl.coord(stream.original_index[r]).view].push_back(r);
  }
  std::vector<std::vector<int>> groups;
  for (auto& [v, rows] : by_view) groups.push_back(std::move(rows));
  return groups;
}

bool partition_holds(const std::vector<int>& active, const StorageBuffer& buf,
                     int universe) {
  std::vector<char> seen(universe, 0);
  int count = 0;
  auto mark = [&](int id) {
    if (id < 0 || id >= universe || seen[id]) return false;
    seen[id] = 1;
    ++count;
    return true;
  };
  for (int id : active) {
    if (!mark(id)) return false;
  }
  for (const auto& e : buf.entries) {
    if (!mark(e.original_index)) return false;
  }
  return count == universe;
}

int topk_count(double frac, int total) {
  return std::max(1, static_cast<int>(std::ceil(frac * total)));
}

const MlpParams& pick_head(const ModelParams& p, RelevanceKind kind) {
  return kind == RelevanceKind::plan ? p.rel_head_plan : p.rel_head_det;
}

}  // namespace

Tensor2 decoder_layer_forward(const Tensor2& queries,
                              const std::vector<std::array<double, 3>>& ref_points,
                              const std::vector<ViewPyramid>& pyramids,
                              const DecoderLayerParams& layer,
                              const ModelConfig& cfg) {
  Tensor2 x = transformer_block(queries, layer.attn_mlp);
  for (int j = 0; j < x.rows; ++j) {
    ViewPoint vp = project_to_view({ref_points[j][0], ref_points[j][1]},
                                   static_cast<int>(pyramids.size()), cfg.bev_range);
    const ViewPyramid& pyr = pyramids[vp.view];
    std::vector<FeatureLevel> levels;
    for (size_t l = 0; l < pyr.levels.size(); ++l) {
      levels.push_back({&pyr.levels[l], pyr.dims[l].first, pyr.dims[l].second});
    }
    auto dres = deformable_cross_attention(x.row(j), vp.u, vp.v, levels, layer.deform);
    auto row = x.row(j);
    for (int c = 0; c < x.cols; ++c) row[c] += dres.context[c];
  }
  return x;
}

PipelineResult run_pipeline(const FrameInput& input, const ModelParams& params,
                            const ModelConfig& cfg, const ScheduleConfig& schedule,
                            RunMode mode, uint64_t routing_seed, int train_iter) {
  cfg.validate();
  schedule.validate();
  if (static_cast<int>(input.view_features.size()) != cfg.views) {
    throw ShapeMismatch("view feature count");
  }
  if (static_cast<int>(cfg.backbone_layout.size()) != schedule.backbone_layers ||
      cfg.decoder_layers != schedule.decoder_layers) {
    throw ConfigError("schedule layer counts do not match the model");
  }

  const bool sparse = mode != RunMode::dense;
  const int d = cfg.embed_dim;
  const int n0 = cfg.total_tokens();
  const int q0 = input.queries.embeddings.rows;
  CoordTable tbl{cfg.views, cfg.grid_h, cfg.grid_w};

  double tkr_eff = schedule.tkr;
  if (mode == RunMode::sparse_train && train_iter >= 0) {
    tkr_eff = training_keep_ratio(train_iter, schedule.warmup_start,
                                  schedule.warmup_end, schedule.tkr);
  }
  TopkMode topk_mode = mode == RunMode::sparse_train
                           ? TopkMode::straight_through_train
                           : TopkMode::hard_eval;

  PipelineResult result;
  result.trace.initial_tokens = n0;
  result.trace.initial_queries = q0;

  std::vector<double> ego_embed =
      mlp_forward(params.ego_mlp, std::span<const double>(input.ego_kinematics));
  const MlpParams& rel_head = pick_head(params, cfg.relevance_kind);
  std::span<const double> ego_for_kind =
      cfg.relevance_kind == RelevanceKind::plan
          ? std::span<const double>(ego_embed)
          : std::span<const double>();

  // Patch embedding, views concatenated into one stream.
  TokenStream tokens;
  tokens.embeddings = Tensor2(n0, d);
  tokens.original_index.resize(n0);
  std::iota(tokens.original_index.begin(), tokens.original_index.end(), 0);
  for (int v = 0; v < cfg.views; ++v) {
    const Tensor2& feat = input.view_features[v];
    if (feat.rows != cfg.tokens_per_view() || feat.cols != cfg.input_channels) {
      throw ShapeMismatch("view feature grid");
    }
    Tensor2 emb = matmul_nt(feat, params.patch_embed);
    add_row_inplace(emb, params.patch_bias);
    for (int r = 0; r < emb.rows; ++r) {
      auto src = emb.row(r);
      std::copy(src.begin(), src.end(),
                tokens.embeddings.row(v * cfg.tokens_per_view() + r).begin());
    }
  }

  StorageBuffer token_buf{BufferKind::image, {}};
  uint64_t stage_counter = 0;

  auto record_stage = [&result](const char* name, BufferKind kind, int layer,
                                int before, int kept, int buf_size, double ratio,
                                bool ok) {
    result.trace.stages.push_back(
        {name, kind, layer, before, kept, buf_size, ratio, ok});
  };

  for (int layer = 1; layer <= schedule.backbone_layers; ++layer) {
    if (sparse) {
      bool prune_here = std::find(schedule.token_prune_layers.begin(),
                                  schedule.token_prune_layers.end(),
                                  layer) != schedule.token_prune_layers.end();
      if (prune_here) {
        auto pyramids = snapshot_pyramids(tokens, tbl, d, cfg.fpn_levels);
        auto qr = query_relevance(input.queries, pyramids, rel_head,
                                  params.rel_deform, ego_for_kind,
                                  cfg.relevance_kind, cfg);
        int k = topk_count(cfg.relevance_topk_frac, q0);
        GumbelTopkConfig pick{k, 1.0, 0, TopkMode::hard_eval, 0};
        auto top = gumbel_topk(qr.scores.scores, pick);
        Tensor2 fp(k, qr.footprints.cols);
        for (int i = 0; i < k; ++i) {
          auto src = qr.footprints.row(top.kept[i]);
          std::copy(src.begin(), src.end(), fp.row(i).begin());
        }
        auto r_img = token_relevance(fp);

        std::vector<double> active_scores(tokens.embeddings.rows);
        for (int r = 0; r < tokens.embeddings.rows; ++r) {
          active_scores[r] = r_img[tokens.original_index[r]];
        }
        double ratio = schedule.token_ratio_at(layer, tkr_eff);
        int before = tokens.embeddings.rows;
        int keep = std::clamp(static_cast<int>(std::floor(ratio * n0)), 1, before);
        GumbelTopkConfig route{keep, 1.0, mix64(routing_seed, stage_counter),
                               topk_mode, stage_counter};
        ++stage_counter;
        select_and_store(tokens, active_scores, keep, route, token_buf, layer);
        record_stage("token_prune", BufferKind::image, layer, before,
                     tokens.embeddings.rows,
                     static_cast<int>(token_buf.entries.size()), ratio,
                     partition_holds(tokens.original_index, token_buf, n0));
      }
      if (layer == schedule.token_reactivation_layer) {
        int before = tokens.embeddings.rows;
        reactivate(tokens, token_buf);
        record_stage("token_reactivate", BufferKind::image, layer, before,
                     tokens.embeddings.rows, 0, 1.0,
                     partition_holds(tokens.original_index, token_buf, n0));
      }
    }
    auto groups = cfg.backbone_layout[layer - 1] == 'w'
                      ? window_groups(tokens, tbl, cfg.window)
                      : view_groups(tokens, tbl);
    tokens.embeddings =
        transformer_block_grouped(tokens.embeddings, groups,
                                  params.backbone[layer - 1]);
    result.trace.total_token_rows += tokens.embeddings.rows;
  }
  result.trace.final_tokens = tokens.embeddings.rows;

  // Feature pyramid from the (full) final token set.
  auto final_views = snapshot_views(tokens, tbl, d);
  std::vector<ViewPyramid> pyramids;
  for (auto& v : final_views) {
    pyramids.push_back(build_pyramid(v, cfg.grid_h, cfg.grid_w, cfg.fpn_levels));
  }

  // Decoder with query routing.
  QuerySet queries = input.queries;
  StorageBuffer query_buf{BufferKind::query, {}};
  for (int layer = 1; layer <= schedule.decoder_layers; ++layer) {
    if (sparse) {
      bool prune_here = std::find(schedule.query_prune_layers.begin(),
                                  schedule.query_prune_layers.end(),
                                  layer) != schedule.query_prune_layers.end();
      if (prune_here) {
        auto qr = query_relevance(queries, pyramids, rel_head, params.rel_deform,
                                  ego_for_kind, cfg.relevance_kind, cfg);
        double ratio = schedule.query_ratio_at(layer, tkr_eff);
        int before = queries.embeddings.rows;
        int keep = std::clamp(static_cast<int>(std::floor(ratio * q0)), 1, before);
        GumbelTopkConfig route{keep, 1.0, mix64(routing_seed, stage_counter),
                               topk_mode, stage_counter};
        ++stage_counter;
        select_and_store(queries, qr.scores.scores, keep, route, query_buf, layer);
        record_stage("query_prune", BufferKind::query, layer, before,
                     queries.embeddings.rows,
                     static_cast<int>(query_buf.entries.size()), ratio,
                     partition_holds(queries.original_index, query_buf, q0));
      }
      if (layer == schedule.query_reactivation_layer) {
        int before = queries.embeddings.rows;
        reactivate(queries, query_buf);
        record_stage("query_reactivate", BufferKind::query, layer, before,
                     queries.embeddings.rows, 0, 1.0,
                     partition_holds(queries.original_index, query_buf, q0));
      }
    }
    queries.embeddings = decoder_layer_forward(queries.embeddings,
                                               queries.reference_points, pyramids,
                                               params.decoder[layer - 1], cfg);
  }
  result.trace.final_queries = queries.embeddings.rows;

  // Heads.
  int c = static_cast<int>(cfg.classes.size());
  Tensor2 logits = matmul_nt(queries.embeddings, params.cls_head);
  add_row_inplace(logits, params.cls_bias);
  Tensor2 probs = logits;
  for (double& v : probs.data) v = sigmoid(v);

  Tensor2 box_raw = matmul_nt(queries.embeddings, params.box_head);
  add_row_inplace(box_raw, params.box_bias);
  Tensor2 box_params = box_raw;
  for (int j = 0; j < box_params.rows; ++j) {
    box_params.at(j, 0) += queries.reference_points[j][0];
    box_params.at(j, 1) += queries.reference_points[j][1];
    box_params.at(j, 2) += queries.reference_points[j][2];
  }

  result.final_query_embeddings = queries.embeddings;
  result.final_class_probs = probs;
  result.final_box_params = box_params;
  result.final_ref_points = queries.reference_points;
  result.final_scores.resize(queries.embeddings.rows);

  QuerySet next = queries;
  for (int j = 0; j < queries.embeddings.rows; ++j) {
    int best = 0;
    for (int k = 1; k < c; ++k) {
      if (probs.at(j, k) > probs.at(j, best)) best = k;
    }
    double score = probs.at(j, best);
    result.final_scores[j] = score;
    next.reference_points[j] = {box_params.at(j, 0), box_params.at(j, 1),
                                box_params.at(j, 2)};
    if (score >= cfg.min_det_score) {
      PipelineDetection det;
      det.class_name = cfg.classes[best];
      det.score = score;
      det.x = box_params.at(j, 0);
      det.y = box_params.at(j, 1);
      det.z = box_params.at(j, 2);
      det.length = std::exp(std::clamp(box_params.at(j, 3), -4.0, 4.0));
      det.width = std::exp(std::clamp(box_params.at(j, 4), -4.0, 4.0));
      det.height = std::exp(std::clamp(box_params.at(j, 5), -4.0, 4.0));
      det.yaw = std::atan2(box_params.at(j, 6), box_params.at(j, 7));
      det.vx = box_params.at(j, 8);
      det.vy = box_params.at(j, 9);
      result.detections.push_back(std::move(det));
    }
  }
  result.final_queries = std::move(next);

  auto final_rel = query_relevance(queries, pyramids, rel_head, params.rel_deform,
                                   ego_for_kind, cfg.relevance_kind, cfg);
  result.final_query_relevance = std::move(final_rel.scores);
  result.pyramids = std::move(pyramids);
  if (!result.pyramids.empty()) result.finest_tokens = result.pyramids.front();
  return result;
}

// ---------------------------------------------------------------------------
// Rendering

std::vector<Tensor2> render_frame_views(const Scene& scene, const Frame& frame,
                                        const ModelConfig& cfg, uint64_t seed) {
  uint64_t frame_key = mix64(seed, hash_string(scene.scene_id),
                             hash_string(frame.frame_id));
  std::vector<Tensor2> views(cfg.views,
                             Tensor2(cfg.tokens_per_view(), cfg.input_channels));
  for (int v = 0; v < cfg.views; ++v) {
    for (int cell = 0; cell < cfg.tokens_per_view(); ++cell) {
      for (int ch = 0; ch < cfg.input_channels; ++ch) {
        double u = keyed_uniform(frame_key, v, cell * 131 + ch);
        views[v].at(cell, ch) = 0.1 * (u - 0.5);
      }
    }
  }

  SE2Pose ego_pose = ego_pose_at(scene, frame.timestamp);
  SE2Pose world_to_ego = ego_pose.inverse();
  auto ego_vel = track_velocity_at(scene.ego, frame.timestamp);
  double cy = std::cos(-ego_pose.rotation), sy = std::sin(-ego_pose.rotation);

  auto gts = frame_ground_truth(scene, frame);
  for (const auto& gt : gts) {
    Point2 p = world_to_ego.apply(gt.box.center);
    double r = norm(p);
    if (r > 1.05 * cfg.bev_range) continue;
    ViewPoint vp = project_to_view(p, cfg.views, cfg.bev_range);

    double rvx = gt.velocity.first - ego_vel.first;
    double rvy = gt.velocity.second - ego_vel.second;
    double evx = cy * rvx - sy * rvy;
    double evy = sy * rvx + cy * rvy;

    std::vector<double> desc(cfg.input_channels, 0.0);
    desc[0] = 1.0;  // occupancy
    if (cfg.input_channels > 1) desc[1] = evx / 10.0;
    if (cfg.input_channels > 2) desc[2] = evy / 10.0;
    if (cfg.input_channels > 3) desc[3] = r / cfg.bev_range;
    if (cfg.input_channels > 4) desc[4] = 1.0 - r / cfg.bev_range;
    int cls_slot = 5;
    for (size_t k = 0; k < cfg.classes.size(); ++k) {
      if (cls_slot + static_cast<int>(k) >= cfg.input_channels) break;
      if (cfg.classes[k] == gt.class_name) desc[cls_slot + k] = 1.0;
    }

    double fx = vp.u * (cfg.grid_w - 1);
    double fy = vp.v * (cfg.grid_h - 1);
    int x0 = std::min(static_cast<int>(fx), cfg.grid_w - 1);
    int y0 = std::min(static_cast<int>(fy), cfg.grid_h - 1);
    int x1 = std::min(x0 + 1, cfg.grid_w - 1);
    int y1 = std::min(y0 + 1, cfg.grid_h - 1);
    double ax = fx - x0, ay = fy - y0;
    const double w[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
    const int cells[4] = {y0 * cfg.grid_w + x0, y0 * cfg.grid_w + x1,
                          y1 * cfg.grid_w + x0, y1 * cfg.grid_w + x1};
    for (int i = 0; i < 4; ++i) {
      for (int ch = 0; ch < cfg.input_channels; ++ch) {
        views[vp.view].at(cells[i], ch) += w[i] * desc[ch];
      }
    }
  }
  return views;
}

std::array<double, 3> ego_kinematics_at(const Scene& scene, double t) {
  auto vel = track_velocity_at(scene.ego, t);
  double speed = std::hypot(vel.first, vel.second);

  double dt = 0.25;
  double t0 = std::max(scene.ego.first_time(), t - dt);
  double t1 = std::min(scene.ego.last_time(), t + dt);
  double yaw_rate = 0.0, accel = 0.0;
  if (t1 > t0 + 1e-9) {
    double yaw0 = track_box_at(scene.ego, t0).yaw;
    double yaw1 = track_box_at(scene.ego, t1).yaw;
    yaw_rate = wrap_angle(yaw1 - yaw0) / (t1 - t0);
    auto v0 = track_velocity_at(scene.ego, t0);
    auto v1 = track_velocity_at(scene.ego, t1);
    accel = (std::hypot(v1.first, v1.second) - std::hypot(v0.first, v0.second)) /
            (t1 - t0);
  }
  return {speed, yaw_rate, accel};
}

}  // namespace store3d
