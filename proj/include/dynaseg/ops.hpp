#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dynaseg/tensor.hpp"

namespace dynaseg {

// Label value excluded from losses and metrics.
inline constexpr int kVoidLabel = 255;

// --- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // [m,n] -> [n,m]
Tensor reshape(const Tensor& a, Shape shape);

// --- elementwise ----------------------------------------------------------
//
// Binary ops produce a's shape. `b` is right-aligned against `a` and every one
// of its extents must equal a's or be 1 (an extent of 1 stretches). Any other
// combination is a DimensionError.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact: x * Phi(x)
Tensor absolute(const Tensor& a);

// --- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar
Tensor avg_pool_rows(const Tensor& x);  // [N,C] -> [C]

// --- normalization / attention --------------------------------------------

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

inline constexpr double kLayerNormEps = 1e-5;
// Normalizes over the last axis. A zero-variance row maps to beta.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta);

// --- spatial ops ----------------------------------------------------------

// x: [C,H,W], weight: [C,3,3], bias: [C]. Stride 1, zero padding 1.
Tensor depthwise_conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Patch extraction over a token grid. tokens: [H*W, C] (row-major pixels).
// Output row (oy*Wo + ox) holds the k*k*C window in (ky, kx, c) order.
Tensor im2col(const Tensor& tokens, int64_t height, int64_t width, int64_t kernel,
              int64_t stride, int64_t padding);
int64_t conv_out_extent(int64_t in, int64_t kernel, int64_t stride, int64_t padding);

// Bilinear resize of a token grid [H*W, C] -> [Ho*Wo, C] using the
// half-pixel (align_corners = false) source mapping.
Tensor resize_bilinear(const Tensor& tokens, int64_t height, int64_t width, int64_t out_height,
                       int64_t out_width);

// --- slicing / joining ----------------------------------------------------

Tensor slice_cols(const Tensor& a, int64_t begin, int64_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

// --- losses ---------------------------------------------------------------

Tensor mse(const Tensor& a, const Tensor& b);

// logits: [P,K], labels: P entries. Mean over non-void pixels.
Tensor cross_entropy(const Tensor& logits, std::span<const uint8_t> labels);

// -sum_k softmax(teacher)_k * log softmax(student)_k averaged over non-void
// pixels. Teacher logits are constants.
Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_logits,
                          std::span<const uint8_t> labels);

}  // namespace dynaseg
