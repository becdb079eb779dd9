#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rrl {

/// Dense row-major float32 array. Shapes are small vectors of positive
/// extents; data length always equals the shape product.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(count(shape)), fill);
  }
  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != count(shape))
      throw std::invalid_argument("Tensor: data length does not match shape product");
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int e : s) {
      if (e <= 0) throw std::invalid_argument("Tensor: non-positive shape extent");
      n *= e;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s), 0.0f); }
  static Tensor full(std::vector<int> s, float v) { return Tensor(std::move(s), v); }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  float& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const float& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(float v) { std::fill(data.begin(), data.end(), v); }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }
};

// ---------------------------------------------------------------------------
// Hot numeric kernels. Loops are ordered so the innermost index is contiguous
// in every operand, which lets the compiler vectorize without reassociation
// flags; dot products get an explicit simd reduction pragma.
// ---------------------------------------------------------------------------

inline float dotf(const float* a, const float* b, int n) {
  float s = 0.0f;
#pragma omp simd reduction(+ : s)
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpyf(float a, const float* x, float* y, int n) {
#pragma omp simd
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_acc(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<int64_t>(i) * k;
    float* crow = c + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      axpyf(av, b + static_cast<int64_t>(p) * n, crow, n);
    }
  }
}

}  // namespace rrl
