#include "store3d/profiler.hpp"

#include <cmath>

namespace store3d {

PipelineShape PipelineShape::from_model(const ModelConfig& cfg) {
  PipelineShape s;
  s.views = cfg.views;
  s.tokens_per_view = cfg.tokens_per_view();
  s.embed_dim = cfg.embed_dim;
  s.heads = cfg.heads;
  s.window = cfg.window;
  s.backbone_layout = cfg.backbone_layout;
  s.decoder_layers = cfg.decoder_layers;
  s.queries = cfg.total_queries();
  s.deform_points = cfg.deform_points;
  s.fpn_levels = cfg.fpn_levels;
  return s;
}

void PipelineShape::validate() const {
  if (views < 1 || tokens_per_view < 1 || embed_dim < 1 || queries < 1 ||
      decoder_layers < 1 || deform_points < 1 || fpn_levels < 1 ||
      !(bytes_per_element > 0)) {
    throw ConfigError("pipeline shape entries must be positive");
  }
  for (char c : backbone_layout) {
    if (c != 'w' && c != 'g') throw ConfigError("layout must be 'w'/'g'");
  }
}

double attention_flops(double n_tokens, int dim, int heads,
                       std::optional<int> window) {
  (void)heads;  // head count redistributes, it does not change the MAC total
  double d = dim;
  double proj = 8.0 * n_tokens * d * d;   // QKV + output projections
  double mlp = 16.0 * n_tokens * d * d;   // 4x hidden MLP
  double scores = window ? 4.0 * n_tokens * (*window) * (*window) * d
                         : 4.0 * n_tokens * n_tokens * d;
  return proj + scores + mlp;
}

double decoder_layer_flops(double queries, int dim, int points, int levels) {
  double d = dim;
  double self_attn = 8.0 * queries * d * d + 4.0 * queries * queries * d;
  double mlp = 16.0 * queries * d * d;
  double deform = queries * (levels * points) * (8.0 * d + 6.0 * d);
  return self_attn + mlp + deform;
}

double decoder_flops(double queries, int dim, int points, int levels,
                     int layers) {
  return layers * decoder_layer_flops(queries, dim, points, levels);
}

namespace {

struct WalkTotals {
  double backbone = 0.0;
  double decoder = 0.0;
  double mkr = 0.0;
  double buffer_entries = 0.0;
  std::vector<StageFlops> stages;
};

WalkTotals walk(const PipelineShape& shape, const ScheduleConfig& schedule,
                double token_scale, double query_scale, bool sparse) {
  WalkTotals t;
  const double n_view = shape.tokens_per_view * token_scale;
  const double n_total = n_view * shape.views;
  const double q_total = shape.queries * query_scale;
  const int lb = static_cast<int>(shape.backbone_layout.size());

  double cur = 1.0;
  for (int layer = 1; layer <= lb; ++layer) {
    if (sparse) {
      for (int pl : schedule.token_prune_layers) {
        if (pl == layer) {
          double next = schedule.token_ratio_at(layer, schedule.tkr);
          t.buffer_entries += n_total * (cur - next);
          cur = next;
        }
      }
      if (layer == schedule.token_reactivation_layer) cur = 1.0;
    }
    bool windowed = shape.backbone_layout[layer - 1] == 'w';
    double flops = shape.views *
                   attention_flops(n_view * cur, shape.embed_dim, shape.heads,
                                   windowed ? std::optional<int>(shape.window)
                                            : std::nullopt);
    t.backbone += flops;
    t.mkr += cur / lb;
    t.stages.push_back({windowed ? "backbone_window" : "backbone_global", layer,
                        cur, n_total * cur, flops});
  }

  double curq = 1.0;
  for (int layer = 1; layer <= shape.decoder_layers; ++layer) {
    if (sparse) {
      for (int pl : schedule.query_prune_layers) {
        if (pl == layer) {
          double next = schedule.query_ratio_at(layer, schedule.tkr);
          t.buffer_entries += q_total * (curq - next);
          curq = next;
        }
      }
      if (layer == schedule.query_reactivation_layer) curq = 1.0;
    }
    double flops = decoder_layer_flops(q_total * curq, shape.embed_dim,
                                       shape.deform_points, shape.fpn_levels);
    t.decoder += flops;
    t.stages.push_back({"decoder", layer, curq, q_total * curq, flops});
  }
  return t;
}

}  // namespace

FlopReport pipeline_flops(const PipelineShape& shape,
                          const ScheduleConfig& schedule) {
  shape.validate();
  schedule.validate();
  if (static_cast<int>(shape.backbone_layout.size()) != schedule.backbone_layers ||
      shape.decoder_layers != schedule.decoder_layers) {
    throw ConfigError("schedule layer counts do not match the shape");
  }

  WalkTotals sparse = walk(shape, schedule, 1.0, 1.0, true);
  WalkTotals dense = walk(shape, schedule, 1.0, 1.0, false);

  FlopReport r;
  r.stages = std::move(sparse.stages);
  r.backbone_total = sparse.backbone;
  r.decoder_total = sparse.decoder;
  r.total = sparse.backbone + sparse.decoder;
  r.dense_total = dense.backbone + dense.decoder;
  r.ratio = r.total / r.dense_total;
  r.mkr = sparse.mkr;
  r.buffer_entries = sparse.buffer_entries;
  r.buffer_bytes = buffer_bytes_for(r.buffer_entries, shape.embed_dim,
                                    shape.bytes_per_element);
  r.buffer_bytes_fp16 = buffer_bytes_for(r.buffer_entries, shape.embed_dim, 2.0);
  r.buffer_bytes_fp32 = buffer_bytes_for(r.buffer_entries, shape.embed_dim, 4.0);
  return r;
}

SensitivityReport sensitivity(const PipelineShape& shape) {
  shape.validate();
  ScheduleConfig dense;
  dense.tkr = 1.0;
  dense.backbone_layers = static_cast<int>(shape.backbone_layout.size());
  dense.token_reactivation_layer = dense.backbone_layers;
  dense.decoder_layers = shape.decoder_layers;
  dense.query_reactivation_layer = shape.decoder_layers;

  auto totals = [&](double ts, double qs) {
    return walk(shape, dense, ts, qs, false);
  };
  WalkTotals base = totals(1.0, 1.0);
  WalkTotals tok_hi = totals(1.1, 1.0), tok_lo = totals(0.9, 1.0);
  WalkTotals qry_hi = totals(1.0, 1.1), qry_lo = totals(1.0, 0.9);

  SensitivityReport s;
  s.backbone_token = (tok_hi.backbone - tok_lo.backbone) / (0.2 * base.backbone);
  s.backbone_query = (qry_hi.backbone - qry_lo.backbone) / (0.2 * base.backbone);
  s.decoder_token = (tok_hi.decoder - tok_lo.decoder) / (0.2 * base.decoder);
  s.decoder_query = (qry_hi.decoder - qry_lo.decoder) / (0.2 * base.decoder);
  return s;
}

}  // namespace store3d
