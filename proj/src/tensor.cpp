#include "store3d/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace store3d {

namespace macs {
namespace {
thread_local uint64_t g_count = 0;
}
void reset() { g_count = 0; }
uint64_t count() { return g_count; }
void add(uint64_t n) { g_count += n; }
}  // namespace macs

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.rows) throw ShapeMismatch("matmul inner dims");
  Tensor2 out(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    for (int k = 0; k < a.cols; ++k) {
      double av = a.at(i, k);
      const double* brow = b.data.data() + static_cast<size_t>(k) * b.cols;
      double* orow = out.data.data() + static_cast<size_t>(i) * out.cols;
      for (int j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
  macs::add(static_cast<uint64_t>(a.rows) * a.cols * b.cols);
  return out;
}

Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.cols) throw ShapeMismatch("matmul_nt inner dims");
  Tensor2 out(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < b.rows; ++j) {
      double acc = 0.0;
      const double* ar = a.data.data() + static_cast<size_t>(i) * a.cols;
      const double* br = b.data.data() + static_cast<size_t>(j) * b.cols;
      for (int k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      out.at(i, j) = acc;
    }
  }
  macs::add(static_cast<uint64_t>(a.rows) * a.cols * b.rows);
  return out;
}

Tensor2 transpose(const Tensor2& a) {
  Tensor2 out(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

void add_inplace(Tensor2& a, const Tensor2& b) {
  if (!a.same_shape(b)) throw ShapeMismatch("add_inplace shapes");
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void add_row_inplace(Tensor2& a, std::span<const double> bias) {
  if (static_cast<int>(bias.size()) != a.cols) throw ShapeMismatch("bias size");
  for (int i = 0; i < a.rows; ++i) {
    auto r = a.row(i);
    for (int j = 0; j < a.cols; ++j) r[j] += bias[j];
  }
}

std::vector<double> affine(const Tensor2& w, std::span<const double> x,
                           std::span<const double> b) {
  if (static_cast<int>(x.size()) != w.cols) throw ShapeMismatch("affine input size");
  std::vector<double> out(w.rows, 0.0);
  for (int i = 0; i < w.rows; ++i) {
    double acc = 0.0;
    const double* wr = w.data.data() + static_cast<size_t>(i) * w.cols;
    for (int j = 0; j < w.cols; ++j) acc += wr[j] * x[j];
    out[i] = acc;
  }
  if (!b.empty()) {
    if (b.size() != out.size()) throw ShapeMismatch("affine bias size");
    for (size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  }
  macs::add(static_cast<uint64_t>(w.rows) * w.cols);
  return out;
}

void softmax_inplace(std::span<double> v) {
  double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

void softmax_rows(Tensor2& a) {
  for (int i = 0; i < a.rows; ++i) softmax_inplace(a.row(i));
}

void layernorm_rows(Tensor2& a) {
  for (int i = 0; i < a.rows; ++i) {
    auto r = a.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= a.cols;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= a.cols;
    double inv = 1.0 / std::sqrt(var + 1e-6);
    for (double& v : r) v = (v - mean) * inv;
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void require_finite(const Tensor2& t, const char* what) {
  for (double v : t.data) {
    if (!std::isfinite(v)) throw DomainError(std::string("non-finite value in ") + what);
  }
}

}  // namespace store3d
