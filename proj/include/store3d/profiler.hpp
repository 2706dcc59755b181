#pragma once

#include <optional>
#include <string>
#include <vector>

#include "store3d/sparsity.hpp"

namespace store3d {

struct PipelineShape {
  int views = 2;
  int tokens_per_view = 256;
  int embed_dim = 32;
  int heads = 4;
  int window = 4;
  std::string backbone_layout = "wgwgwg";
  int decoder_layers = 3;
  int queries = 44;
  int deform_points = 4;
  int fpn_levels = 2;
  double bytes_per_element = 4.0;

  static PipelineShape from_model(const ModelConfig& cfg);
  void validate() const;
};

// One transformer block (QKV + out projections, scores + weighted sum, 4x
// MLP), 1 MAC = 2 FLOPs, biases/nonlinearities ignored. `window` set means
// the quadratic term is replaced by the block-local cost 4*N*w^2*D.
double attention_flops(double n_tokens, int dim, int heads,
                       std::optional<int> window);

// One decoder layer: query self-attention block + deformable sampling
// (8D per point) with offset/weight projections (6D per point). Sampling
// cost is independent of the pyramid size.
double decoder_layer_flops(double queries, int dim, int points, int levels);

double decoder_flops(double queries, int dim, int points, int levels,
                     int layers);

struct StageFlops {
  std::string stage;
  int layer = 0;
  double keep_ratio = 1.0;
  double active = 0.0;  // tokens or queries at this layer
  double flops = 0.0;
};

struct FlopReport {
  std::vector<StageFlops> stages;
  double backbone_total = 0.0;
  double decoder_total = 0.0;
  double total = 0.0;
  double dense_total = 0.0;
  double ratio = 1.0;  // total / dense
  double mkr = 1.0;    // mean token keep ratio over backbone layers
  double buffer_entries = 0.0;
  double buffer_bytes = 0.0;       // at shape.bytes_per_element
  double buffer_bytes_fp16 = 0.0;  // 2 bytes per element
  double buffer_bytes_fp32 = 0.0;  // 4 bytes per element
};

FlopReport pipeline_flops(const PipelineShape& shape,
                          const ScheduleConfig& schedule);

inline double buffer_bytes_for(double entries, int dim, double bytes_per_element) {
  return entries * dim * bytes_per_element;
}

// Central-difference sensitivities at +-10% of each axis, normalized as
// (F(1.1a) - F(0.9a)) / (0.2 * F(a)), on the dense shape.
struct SensitivityReport {
  double backbone_token = 0.0;
  double backbone_query = 0.0;
  double decoder_token = 0.0;
  double decoder_query = 0.0;
};

SensitivityReport sensitivity(const PipelineShape& shape);

}  // namespace store3d
