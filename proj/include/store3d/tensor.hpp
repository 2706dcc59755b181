#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "store3d/common.hpp"

namespace store3d {

// Multiply-accumulate counter for the FLOP model cross-check. Dense matmuls
// and bilinear sampling are the only counted operations; softmax, norms and
// bias adds are ignored, matching the reported counting convention.
namespace macs {
void reset();
uint64_t count();
void add(uint64_t n);
}  // namespace macs

// Dense row-major matrix of doubles.
struct Tensor2 {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor2() = default;
  Tensor2(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  std::span<double> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
  std::span<const double> row(int r) const { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }

  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }
};

// out = a * b, counts rows*inner*cols MACs.
Tensor2 matmul(const Tensor2& a, const Tensor2& b);

// out = a * b^T, counts a.rows*a.cols*b.rows MACs.
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);

Tensor2 transpose(const Tensor2& a);
void add_inplace(Tensor2& a, const Tensor2& b);
void add_row_inplace(Tensor2& a, std::span<const double> bias);

// y = W x + b for a single vector; counts W.rows*W.cols MACs.
std::vector<double> affine(const Tensor2& w, std::span<const double> x,
                           std::span<const double> b);

// Row-wise softmax with max subtraction; rows sum to 1.
void softmax_rows(Tensor2& a);
void softmax_inplace(std::span<double> v);

// Layer norm over each row (eps 1e-6), gain/bias-free.
void layernorm_rows(Tensor2& a);

double gelu(double x);
double gelu_grad(double x);
double sigmoid(double x);

void require_finite(const Tensor2& t, const char* what);

}  // namespace store3d
