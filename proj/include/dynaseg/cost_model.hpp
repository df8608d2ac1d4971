#pragma once

#include <cstdint>

// Operation-count conventions shared by the predictor and model FLOPs
// accounting. A multiply-accumulate counts as 2 FLOPs; transcendental and
// division costs are fixed per element.
namespace dynaseg::cost {

inline constexpr int64_t kFlopsPerMac = 2;
inline constexpr int64_t kExp = 4;
inline constexpr int64_t kDiv = 1;
inline constexpr int64_t kSqrt = 4;
inline constexpr int64_t kErf = 4;

// Layer norm over `rows` vectors of width `width`:
// mean (w adds, 1 div), variance (3w, 1 div), rstd (add eps, sqrt, div),
// normalize (2w) and the optional affine (2w).
constexpr int64_t layer_norm(int64_t rows, int64_t width, bool affine = true) {
  const int64_t per_row = 6 * width + 3 * kDiv + 1 + kSqrt + (affine ? 2 * width : 0);
  return rows * per_row;
}

// Row softmax with max subtraction: max, subtract, exp, sum, divide.
constexpr int64_t softmax(int64_t rows, int64_t width) {
  return rows * width * (1 + 1 + kExp + 1 + kDiv);
}

// Exact GeLU x * 0.5 * (1 + erf(x / sqrt 2)): scale, erf, add, two products.
constexpr int64_t gelu(int64_t n) { return n * (1 + kErf + 1 + 2); }

// Four weighted taps per output element: 4 products + 3 adds.
constexpr int64_t bilinear(int64_t out_elems) { return out_elems * 7; }

constexpr int64_t matmul_macs(int64_t m, int64_t k, int64_t n) { return m * k * n; }

}  // namespace dynaseg::cost
