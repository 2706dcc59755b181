#include "store3d/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "store3d/rng.hpp"

namespace store3d {

namespace {

Tensor2 slice_cols(const Tensor2& t, int c0, int c1) {
  Tensor2 out(t.rows, c1 - c0);
  for (int i = 0; i < t.rows; ++i) {
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = t.at(i, j);
  }
  return out;
}

Tensor2 gather_rows(const Tensor2& t, const std::vector<int>& rows) {
  Tensor2 out(static_cast<int>(rows.size()), t.cols);
  for (size_t i = 0; i < rows.size(); ++i) {
    auto src = t.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(static_cast<int>(i)).begin());
  }
  return out;
}

Tensor2 random_matrix(int rows, int cols, double scale, Rng& rng) {
  Tensor2 t(rows, cols);
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

}  // namespace

std::pair<Tensor2, AttentionTrace> attention(const Tensor2& queries,
                                             const Tensor2& keys,
                                             const Tensor2& values, int heads) {
  if (queries.cols != keys.cols) throw ShapeMismatch("query/key dims");
  if (keys.rows != values.rows) throw ShapeMismatch("key/value row counts");
  if (queries.cols % heads != 0 || values.cols % heads != 0) {
    throw ShapeMismatch("feature dim not divisible by heads");
  }
  int dh = queries.cols / heads;
  int dv = values.cols / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor2 out(queries.rows, values.cols);
  Tensor2 trace(queries.rows, keys.rows);
  for (int h = 0; h < heads; ++h) {
    Tensor2 qh = slice_cols(queries, h * dh, (h + 1) * dh);
    Tensor2 kh = slice_cols(keys, h * dh, (h + 1) * dh);
    Tensor2 vh = slice_cols(values, h * dv, (h + 1) * dv);
    Tensor2 scores = matmul_nt(qh, kh);
    for (double& s : scores.data) s *= scale;
    softmax_rows(scores);
    for (size_t i = 0; i < trace.data.size(); ++i) {
      trace.data[i] += scores.data[i] / heads;
    }
    Tensor2 oh = matmul(scores, vh);
    for (int i = 0; i < out.rows; ++i) {
      for (int j = 0; j < dv; ++j) out.at(i, h * dv + j) = oh.at(i, j);
    }
  }
  return {std::move(out), AttentionTrace{std::move(trace)}};
}

Tensor2 windowed_attention(const Tensor2& tokens, int grid_h, int grid_w,
                           int window, int heads) {
  if (tokens.rows != grid_h * grid_w) throw ShapeMismatch("token grid size");
  if (window < 1) throw ShapeMismatch("window must be >= 1");
  int ph = (grid_h + window - 1) / window * window;
  int pw = (grid_w + window - 1) / window * window;

  // Pad with zero tokens, attend per block, crop back.
  Tensor2 padded(ph * pw, tokens.cols);
  for (int r = 0; r < grid_h; ++r) {
    for (int c = 0; c < grid_w; ++c) {
      auto src = tokens.row(r * grid_w + c);
      std::copy(src.begin(), src.end(), padded.row(r * pw + c).begin());
    }
  }

  Tensor2 out_padded(ph * pw, tokens.cols);
  for (int br = 0; br < ph / window; ++br) {
    for (int bc = 0; bc < pw / window; ++bc) {
      std::vector<int> rows;
      rows.reserve(window * window);
      for (int r = 0; r < window; ++r) {
        for (int c = 0; c < window; ++c) {
          rows.push_back((br * window + r) * pw + bc * window + c);
        }
      }
      Tensor2 block = gather_rows(padded, rows);
      auto [blk_out, _] = attention(block, block, block, heads);
      for (size_t i = 0; i < rows.size(); ++i) {
        auto src = blk_out.row(static_cast<int>(i));
        std::copy(src.begin(), src.end(), out_padded.row(rows[i]).begin());
      }
    }
  }

  Tensor2 out(tokens.rows, tokens.cols);
  for (int r = 0; r < grid_h; ++r) {
    for (int c = 0; c < grid_w; ++c) {
      auto src = out_padded.row(r * pw + c);
      std::copy(src.begin(), src.end(), out.row(r * grid_w + c).begin());
    }
  }
  return out;
}

std::vector<double> bilinear_sample(const Tensor2& featmap, int grid_h,
                                    int grid_w, double x, double y) {
  if (featmap.rows != grid_h * grid_w) throw ShapeMismatch("featmap grid size");
  x = std::clamp(x, 0.0, static_cast<double>(grid_w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(grid_h - 1));
  int x0 = std::min(static_cast<int>(x), grid_w - 1);
  int y0 = std::min(static_cast<int>(y), grid_h - 1);
  int x1 = std::min(x0 + 1, grid_w - 1);
  int y1 = std::min(y0 + 1, grid_h - 1);
  double fx = x - x0, fy = y - y0;

  const double w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy);
  const double w10 = (1 - fx) * fy, w11 = fx * fy;
  std::vector<double> out(featmap.cols, 0.0);
  auto r00 = featmap.row(y0 * grid_w + x0);
  auto r01 = featmap.row(y0 * grid_w + x1);
  auto r10 = featmap.row(y1 * grid_w + x0);
  auto r11 = featmap.row(y1 * grid_w + x1);
  for (int c = 0; c < featmap.cols; ++c) {
    out[c] = w00 * r00[c] + w01 * r01[c] + w10 * r10[c] + w11 * r11[c];
  }
  macs::add(static_cast<uint64_t>(4) * featmap.cols);
  return out;
}

MlpParams make_mlp(std::span<const int> dims, uint64_t seed, double scale,
                   bool with_projection) {
  Rng rng(mix64(seed, 0x31a9));
  MlpParams mlp;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    double layer_scale = scale / std::sqrt(static_cast<double>(dims[i]));
    mlp.weights.push_back(random_matrix(dims[i + 1], dims[i], layer_scale, rng));
    mlp.biases.emplace_back(dims[i + 1], 0.0);
  }
  if (with_projection) {
    mlp.final_projection.resize(dims.back());
    double s = scale / std::sqrt(static_cast<double>(dims.back()));
    for (double& v : mlp.final_projection) v = s * rng.normal();
  }
  return mlp;
}

std::vector<double> mlp_forward(const MlpParams& mlp, std::span<const double> x) {
  std::vector<double> h(x.begin(), x.end());
  for (size_t layer = 0; layer < mlp.weights.size(); ++layer) {
    h = affine(mlp.weights[layer], h, mlp.biases[layer]);
    if (layer + 1 < mlp.weights.size()) {
      for (double& v : h) v = gelu(v);
    }
  }
  return h;
}

MlpGrads MlpGrads::zeros_like(const MlpParams& mlp) {
  MlpGrads g;
  for (const auto& w : mlp.weights) g.d_weights.emplace_back(w.rows, w.cols);
  for (const auto& b : mlp.biases) g.d_biases.emplace_back(b.size(), 0.0);
  g.d_final_projection.assign(mlp.final_projection.size(), 0.0);
  return g;
}

void MlpGrads::scale(double s) {
  for (auto& w : d_weights)
    for (double& v : w.data) v *= s;
  for (auto& b : d_biases)
    for (double& v : b) v *= s;
  for (double& v : d_final_projection) v *= s;
}

void MlpGrads::axpy(double a, const MlpGrads& other) {
  for (size_t l = 0; l < d_weights.size(); ++l) {
    for (size_t i = 0; i < d_weights[l].data.size(); ++i) {
      d_weights[l].data[i] += a * other.d_weights[l].data[i];
    }
    for (size_t i = 0; i < d_biases[l].size(); ++i) {
      d_biases[l][i] += a * other.d_biases[l][i];
    }
  }
  for (size_t i = 0; i < d_final_projection.size(); ++i) {
    d_final_projection[i] += a * other.d_final_projection[i];
  }
}

size_t mlp_param_count(const MlpParams& mlp) {
  size_t n = 0;
  for (const auto& w : mlp.weights) n += w.data.size();
  for (const auto& b : mlp.biases) n += b.size();
  n += mlp.final_projection.size();
  return n;
}

std::vector<double> pack_mlp(const MlpParams& mlp) {
  std::vector<double> out;
  out.reserve(mlp_param_count(mlp));
  for (const auto& w : mlp.weights) out.insert(out.end(), w.data.begin(), w.data.end());
  for (const auto& b : mlp.biases) out.insert(out.end(), b.begin(), b.end());
  out.insert(out.end(), mlp.final_projection.begin(), mlp.final_projection.end());
  return out;
}

void unpack_mlp(std::span<const double> flat, MlpParams* mlp) {
  if (flat.size() != mlp_param_count(*mlp)) throw ShapeMismatch("mlp pack size");
  size_t pos = 0;
  for (auto& w : mlp->weights) {
    std::copy(flat.begin() + pos, flat.begin() + pos + w.data.size(), w.data.begin());
    pos += w.data.size();
  }
  for (auto& b : mlp->biases) {
    std::copy(flat.begin() + pos, flat.begin() + pos + b.size(), b.begin());
    pos += b.size();
  }
  std::copy(flat.begin() + pos, flat.end(), mlp->final_projection.begin());
}

std::vector<double> pack_mlp_grads(const MlpGrads& grads) {
  std::vector<double> out;
  for (const auto& w : grads.d_weights) out.insert(out.end(), w.data.begin(), w.data.end());
  for (const auto& b : grads.d_biases) out.insert(out.end(), b.begin(), b.end());
  out.insert(out.end(), grads.d_final_projection.begin(), grads.d_final_projection.end());
  return out;
}

void mlp_apply_step(MlpParams* mlp, const MlpGrads& grads, double lr) {
  for (size_t l = 0; l < mlp->weights.size(); ++l) {
    for (size_t i = 0; i < mlp->weights[l].data.size(); ++i) {
      mlp->weights[l].data[i] -= lr * grads.d_weights[l].data[i];
    }
    for (size_t i = 0; i < mlp->biases[l].size(); ++i) {
      mlp->biases[l][i] -= lr * grads.d_biases[l][i];
    }
  }
  for (size_t i = 0; i < mlp->final_projection.size(); ++i) {
    mlp->final_projection[i] -= lr * grads.d_final_projection[i];
  }
}

namespace {

struct HeadTape {
  std::vector<std::vector<double>> pre;   // pre-activation per layer
  std::vector<std::vector<double>> post;  // post-activation per layer (post[0] = input)
  double logit = 0.0;
  double score = 0.0;
};

HeadTape head_forward_tape(const MlpParams& head, std::span<const double> x) {
  HeadTape tape;
  tape.post.emplace_back(x.begin(), x.end());
  for (size_t layer = 0; layer < head.weights.size(); ++layer) {
    auto z = affine(head.weights[layer], tape.post.back(), head.biases[layer]);
    tape.pre.push_back(z);
    if (layer + 1 < head.weights.size()) {
      for (double& v : z) v = gelu(v);
    }
    tape.post.push_back(std::move(z));
  }
  const auto& u = head.final_projection;
  const auto& out = tape.post.back();
  if (u.size() != out.size()) throw ShapeMismatch("relevance head projection size");
  tape.logit = std::inner_product(u.begin(), u.end(), out.begin(), 0.0);
  macs::add(u.size());
  tape.score = sigmoid(tape.logit);
  return tape;
}

}  // namespace

double relevance_head_score(const MlpParams& head, std::span<const double> x) {
  return head_forward_tape(head, x).score;
}

double relevance_head_score_backward(const MlpParams& head,
                                     std::span<const double> x, double upstream,
                                     MlpGrads* grads,
                                     std::vector<double>* d_input) {
  HeadTape tape = head_forward_tape(head, x);
  double dlogit = upstream * tape.score * (1.0 - tape.score);

  const auto& out = tape.post.back();
  std::vector<double> delta(out.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (grads) grads->d_final_projection[i] += dlogit * out[i];
    delta[i] = dlogit * head.final_projection[i];
  }

  for (int layer = static_cast<int>(head.weights.size()) - 1; layer >= 0; --layer) {
    if (layer + 1 < static_cast<int>(head.weights.size())) {
      // Undo the GELU applied after this layer.
      for (size_t i = 0; i < delta.size(); ++i) {
        delta[i] *= gelu_grad(tape.pre[layer][i]);
      }
    }
    const Tensor2& w = head.weights[layer];
    const auto& input = tape.post[layer];
    if (grads) {
      Tensor2& dw = grads->d_weights[layer];
      auto& db = grads->d_biases[layer];
      for (int r = 0; r < w.rows; ++r) {
        for (int c = 0; c < w.cols; ++c) dw.at(r, c) += delta[r] * input[c];
        db[r] += delta[r];
      }
    }
    std::vector<double> next(w.cols, 0.0);
    for (int r = 0; r < w.rows; ++r) {
      for (int c = 0; c < w.cols; ++c) next[c] += delta[r] * w.at(r, c);
    }
    delta = std::move(next);
  }
  if (d_input) *d_input = std::move(delta);
  return tape.score;
}

DeformableParams make_deformable(int dim, int levels, int points, uint64_t seed) {
  Rng rng(mix64(seed, 0xdef0));
  DeformableParams p;
  p.levels = levels;
  p.points = points;
  double s = 1.0 / std::sqrt(static_cast<double>(dim));
  p.w_offset = random_matrix(levels * points * 2, dim, 0.5 * s, rng);
  p.b_offset.assign(levels * points * 2, 0.0);
  p.w_weight = random_matrix(levels * points, dim, s, rng);
  p.b_weight.assign(levels * points, 0.0);
  return p;
}

DeformableResult deformable_cross_attention(std::span<const double> query,
                                            double ref_u, double ref_v,
                                            const std::vector<FeatureLevel>& pyramid,
                                            const DeformableParams& params) {
  if (pyramid.empty()) throw ShapeMismatch("empty pyramid");
  if (static_cast<int>(pyramid.size()) != params.levels) {
    throw ShapeMismatch("pyramid levels vs params");
  }
  if (static_cast<int>(query.size()) != params.w_offset.cols) {
    throw ShapeMismatch("query dim vs deformable params");
  }
  auto offsets = affine(params.w_offset, query, params.b_offset);
  auto weights = affine(params.w_weight, query, params.b_weight);
  softmax_inplace(weights);

  const FeatureLevel& fine = pyramid.front();
  int channels = fine.features->cols;
  DeformableResult res;
  res.context.assign(channels, 0.0);
  res.footprint.assign(static_cast<size_t>(fine.grid_h) * fine.grid_w, 0.0);

  for (int level = 0; level < params.levels; ++level) {
    const FeatureLevel& fl = pyramid[level];
    for (int pt = 0; pt < params.points; ++pt) {
      int idx = level * params.points + pt;
      double sx = ref_u * (fl.grid_w - 1) + offsets[idx * 2];
      double sy = ref_v * (fl.grid_h - 1) + offsets[idx * 2 + 1];
      auto sample = bilinear_sample(*fl.features, fl.grid_h, fl.grid_w, sx, sy);
      double w = weights[idx];
      for (int c = 0; c < channels; ++c) res.context[c] += w * sample[c];

      // Footprint lives on the finest grid: map the normalized sample
      // position there and scatter the bilinear coefficients.
      double nu = fl.grid_w > 1 ? std::clamp(sx / (fl.grid_w - 1), 0.0, 1.0) : 0.5;
      double nv = fl.grid_h > 1 ? std::clamp(sy / (fl.grid_h - 1), 0.0, 1.0) : 0.5;
      double fx = nu * (fine.grid_w - 1);
      double fy = nv * (fine.grid_h - 1);
      int x0 = std::min(static_cast<int>(fx), fine.grid_w - 1);
      int y0 = std::min(static_cast<int>(fy), fine.grid_h - 1);
      int x1 = std::min(x0 + 1, fine.grid_w - 1);
      int y1 = std::min(y0 + 1, fine.grid_h - 1);
      double ax = fx - x0, ay = fy - y0;
      res.footprint[y0 * fine.grid_w + x0] += w * (1 - ax) * (1 - ay);
      res.footprint[y0 * fine.grid_w + x1] += w * ax * (1 - ay);
      res.footprint[y1 * fine.grid_w + x0] += w * (1 - ax) * ay;
      res.footprint[y1 * fine.grid_w + x1] += w * ax * ay;
    }
  }

  double total = std::accumulate(res.footprint.begin(), res.footprint.end(), 0.0);
  if (total > 0) {
    for (double& v : res.footprint) v /= total;
  }
  return res;
}

GumbelTopkResult gumbel_topk(std::span<const double> scores,
                             const GumbelTopkConfig& cfg) {
  int n = static_cast<int>(scores.size());
  if (cfg.k < 1 || cfg.k > n) throw KTooLarge("k outside [1, n]");
  if (!(cfg.temperature > 0)) throw ConfigError("temperature must be positive");

  // Selection keys: raw scores for hard_eval/soft, Gumbel-perturbed scores
  // for straight-through training. Ties break toward the lower index.
  std::vector<double> keys(scores.begin(), scores.end());
  if (cfg.mode == TopkMode::straight_through_train) {
    for (int i = 0; i < n; ++i) {
      keys[i] += cfg.temperature * keyed_gumbel(cfg.seed, cfg.stage, i);
    }
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return keys[a] > keys[b]; });

  GumbelTopkResult res;
  res.kept.assign(order.begin(), order.begin() + cfg.k);
  std::sort(res.kept.begin(), res.kept.end());

  if (cfg.mode == TopkMode::hard_eval) {
    res.soft_weights.assign(n, 0.0);
    for (int i : res.kept) res.soft_weights[i] = 1.0;
    res.backward = [n](std::span<const double>) {
      return std::vector<double>(n, 0.0);
    };
    return res;
  }

  // k rounds of softmax over z = keys / temperature with already-selected
  // logits masked out; round t's distribution concentrates on order[t].
  std::vector<std::vector<double>> round_probs;
  std::vector<double> soft(n, 0.0);
  std::vector<char> masked(n, 0);
  for (int t = 0; t < cfg.k; ++t) {
    std::vector<double> z(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (!masked[i]) mx = std::max(mx, keys[i] / cfg.temperature);
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      z[i] = masked[i] ? 0.0 : std::exp(keys[i] / cfg.temperature - mx);
      sum += z[i];
    }
    for (int i = 0; i < n; ++i) z[i] /= sum;
    for (int i = 0; i < n; ++i) soft[i] += z[i];
    round_probs.push_back(std::move(z));
    masked[order[t]] = 1;
  }

  if (cfg.mode == TopkMode::soft) {
    res.soft_weights = soft;
  } else {
    res.soft_weights.assign(n, 0.0);  // straight-through: hard forward
    for (int i : res.kept) res.soft_weights[i] = 1.0;
  }

  double inv_temp = 1.0 / cfg.temperature;
  res.backward = [round_probs, inv_temp, n](std::span<const double> upstream) {
    std::vector<double> grad(n, 0.0);
    for (const auto& p : round_probs) {
      double dot_up = 0.0;
      for (int i = 0; i < n; ++i) dot_up += p[i] * upstream[i];
      for (int i = 0; i < n; ++i) {
        grad[i] += inv_temp * p[i] * (upstream[i] - dot_up);
      }
    }
    return grad;
  };
  return res;
}

double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> point,
                         std::span<const double> analytic_grad, double h) {
  if (point.size() != analytic_grad.size()) throw ShapeMismatch("grad size");
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + h;
    double fp = f(x);
    x[i] = keep - h;
    double fm = f(x);
    x[i] = keep;
    double fd = (fp - fm) / (2.0 * h);
    double rel = std::abs(analytic_grad[i] - fd) / std::max(1e-12, std::abs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

std::vector<double> positional_encoding(double x, double y, double z,
                                        int freqs_per_axis) {
  constexpr double kLambdaMax = 256.0;
  constexpr double kLambdaMin = 1.0;
  std::vector<double> out;
  out.reserve(static_cast<size_t>(positional_encoding_dim(freqs_per_axis)));
  for (double v : {x, y, z}) {
    for (int k = 0; k < freqs_per_axis; ++k) {
      double frac = freqs_per_axis > 1 ? static_cast<double>(k) / (freqs_per_axis - 1) : 0.0;
      double lambda = kLambdaMax * std::pow(kLambdaMin / kLambdaMax, frac);
      double omega = 2.0 * kPi / lambda;
      out.push_back(std::sin(omega * v));
      out.push_back(std::cos(omega * v));
    }
  }
  return out;
}

TransformerBlockParams make_transformer_block(int dim, int heads, uint64_t seed) {
  Rng rng(mix64(seed, 0xb10c));
  TransformerBlockParams p;
  double s = 1.0 / std::sqrt(static_cast<double>(dim));
  p.wq = random_matrix(dim, dim, s, rng);
  p.wk = random_matrix(dim, dim, s, rng);
  p.wv = random_matrix(dim, dim, s, rng);
  p.wo = random_matrix(dim, dim, s, rng);
  p.bq.assign(dim, 0.0);
  p.bk.assign(dim, 0.0);
  p.bv.assign(dim, 0.0);
  p.bo.assign(dim, 0.0);
  p.w1 = random_matrix(4 * dim, dim, s, rng);
  p.w2 = random_matrix(dim, 4 * dim, 0.5 / std::sqrt(static_cast<double>(dim)), rng);
  p.b1.assign(4 * dim, 0.0);
  p.b2.assign(dim, 0.0);
  p.heads = heads;
  return p;
}

namespace {

Tensor2 project(const Tensor2& x, const Tensor2& w, const std::vector<double>& b) {
  Tensor2 out = matmul_nt(x, w);  // x: N x D, w: D_out x D -> N x D_out
  add_row_inplace(out, b);
  return out;
}

}  // namespace

Tensor2 transformer_block_grouped(const Tensor2& x,
                                  const std::vector<std::vector<int>>& groups,
                                  const TransformerBlockParams& p) {
  Tensor2 normed = x;
  layernorm_rows(normed);
  Tensor2 q = project(normed, p.wq, p.bq);
  Tensor2 k = project(normed, p.wk, p.bk);
  Tensor2 v = project(normed, p.wv, p.bv);

  Tensor2 attn_out(x.rows, x.cols);
  for (const auto& group : groups) {
    if (group.empty()) continue;
    Tensor2 qg = gather_rows(q, group);
    Tensor2 kg = gather_rows(k, group);
    Tensor2 vg = gather_rows(v, group);
    auto [og, trace] = attention(qg, kg, vg, p.heads);
    for (size_t i = 0; i < group.size(); ++i) {
      auto src = og.row(static_cast<int>(i));
      std::copy(src.begin(), src.end(), attn_out.row(group[i]).begin());
    }
  }
  Tensor2 y = x;
  add_inplace(y, project(attn_out, p.wo, p.bo));

  Tensor2 normed2 = y;
  layernorm_rows(normed2);
  Tensor2 hidden = project(normed2, p.w1, p.b1);
  for (double& val : hidden.data) val = gelu(val);
  add_inplace(y, project(hidden, p.w2, p.b2));
  return y;
}

Tensor2 transformer_block(const Tensor2& x, const TransformerBlockParams& p) {
  std::vector<int> all(x.rows);
  std::iota(all.begin(), all.end(), 0);
  return transformer_block_grouped(x, {all}, p);
}

}  // namespace store3d
