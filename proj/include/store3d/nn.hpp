#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "store3d/tensor.hpp"

namespace store3d {

// Per-query attention weights over keys; rows sum to 1.
struct AttentionTrace {
  Tensor2 weights;
};

// Scaled dot-product multi-head attention on raw Q/K/V (no projections).
// The trace averages the per-head weight matrices.
std::pair<Tensor2, AttentionTrace> attention(const Tensor2& queries,
                                             const Tensor2& keys,
                                             const Tensor2& values, int heads);

// Attention restricted to non-overlapping window x window blocks of an
// h x w token grid (row-major). The grid is padded to window multiples with
// zero tokens and the output cropped back.
Tensor2 windowed_attention(const Tensor2& tokens, int grid_h, int grid_w,
                           int window, int heads);

// Bilinear interpolation on an (h*w) x C feature map; (x, y) are continuous
// grid coordinates (x along width), clamped to the border.
std::vector<double> bilinear_sample(const Tensor2& featmap, int grid_h,
                                    int grid_w, double x, double y);

// Dense MLP: GELU between layers, linear final layer. `final_projection`
// (u) and `ego_embedding` (e_t) serve the relevance-head wiring and are
// empty when unused.
struct MlpParams {
  std::vector<Tensor2> weights;  // layer i maps weights[i].cols -> rows
  std::vector<std::vector<double>> biases;
  std::vector<double> final_projection;
  std::vector<double> ego_embedding;

  int input_dim() const { return weights.front().cols; }
  int output_dim() const { return weights.back().rows; }
};

MlpParams make_mlp(std::span<const int> dims, uint64_t seed, double scale,
                   bool with_projection = false);

std::vector<double> mlp_forward(const MlpParams& mlp, std::span<const double> x);

// Gradient accumulator matching MlpParams layout.
struct MlpGrads {
  std::vector<Tensor2> d_weights;
  std::vector<std::vector<double>> d_biases;
  std::vector<double> d_final_projection;

  static MlpGrads zeros_like(const MlpParams& mlp);
  void scale(double s);
  void axpy(double a, const MlpGrads& other);
};

// Flat parameter vector helpers (layer weights, biases, projection).
size_t mlp_param_count(const MlpParams& mlp);
std::vector<double> pack_mlp(const MlpParams& mlp);
void unpack_mlp(std::span<const double> flat, MlpParams* mlp);
std::vector<double> pack_mlp_grads(const MlpGrads& grads);
void mlp_apply_step(MlpParams* mlp, const MlpGrads& grads, double lr);

// r = sigmoid(u . mlp(x)); backward accumulates d(r)/d(params) * upstream
// into `grads` and optionally d(r)/d(x) into d_input.
double relevance_head_score(const MlpParams& head, std::span<const double> x);
double relevance_head_score_backward(const MlpParams& head,
                                     std::span<const double> x, double upstream,
                                     MlpGrads* grads,
                                     std::vector<double>* d_input = nullptr);

// One feature map of a pyramid level.
struct FeatureLevel {
  const Tensor2* features = nullptr;  // (h*w) x C
  int grid_h = 0;
  int grid_w = 0;
};

struct DeformableParams {
  Tensor2 w_offset;  // (levels*points*2) x D
  std::vector<double> b_offset;
  Tensor2 w_weight;  // (levels*points) x D
  std::vector<double> b_weight;
  int levels = 0;
  int points = 0;
};

DeformableParams make_deformable(int dim, int levels, int points, uint64_t seed);

struct DeformableResult {
  std::vector<double> context;    // C values
  std::vector<double> footprint;  // over the finest level's grid, sums to 1
};

// context = sum over (level, point) of softmaxed weight * bilinear sample at
// ref + learned offset. The footprint scatters each sampling weight onto the
// 4 bilinear-neighbor cells of the finest level.
DeformableResult deformable_cross_attention(std::span<const double> query,
                                            double ref_u, double ref_v,
                                            const std::vector<FeatureLevel>& pyramid,
                                            const DeformableParams& params);

enum class TopkMode { hard_eval, straight_through_train, soft };

struct GumbelTopkConfig {
  int k = 1;
  double temperature = 1.0;
  uint64_t seed = 0;
  TopkMode mode = TopkMode::hard_eval;
  uint64_t stage = 0;  // folded into the noise key
};

struct GumbelTopkResult {
  std::vector<int> kept;             // ascending indices, size k
  std::vector<double> soft_weights;  // size n
  // dL/d(scores) given dL/d(soft_weights); zero map in hard_eval mode.
  std::function<std::vector<double>(std::span<const double>)> backward;
};

GumbelTopkResult gumbel_topk(std::span<const double> scores,
                             const GumbelTopkConfig& cfg);

// Max over coordinates of |g_analytic - g_fd| / max(1e-12, |g_fd|) with
// central differences of step h.
double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> point,
                         std::span<const double> analytic_grad, double h);

// Sinusoidal encoding of (x, y, z), 32 frequency pairs per axis by default.
std::vector<double> positional_encoding(double x, double y, double z,
                                        int freqs_per_axis = 32);
constexpr int kPeFreqs = 32;
inline int positional_encoding_dim(int freqs_per_axis = kPeFreqs) {
  return 3 * 2 * freqs_per_axis;
}

// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)), with a
// 4x hidden MLP. Attention runs within the provided row groups (one group
// covering all rows = global attention).
struct TransformerBlockParams {
  Tensor2 wq, wk, wv, wo;
  std::vector<double> bq, bk, bv, bo;
  Tensor2 w1, w2;
  std::vector<double> b1, b2;
  int heads = 1;
};

TransformerBlockParams make_transformer_block(int dim, int heads, uint64_t seed);

Tensor2 transformer_block(const Tensor2& x, const TransformerBlockParams& p);
Tensor2 transformer_block_grouped(const Tensor2& x,
                                  const std::vector<std::vector<int>>& groups,
                                  const TransformerBlockParams& p);

}  // namespace store3d
