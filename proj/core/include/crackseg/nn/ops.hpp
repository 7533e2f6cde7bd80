// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace crackseg::nn {

/// Row-major single precision GEMM: C = alpha * op(A) * op(B) + beta * C.
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc);

inline int conv_out_extent(int in, int kernel, int stride, int pad, int dilation) {
  return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
}

/// Unfolds one [channels, height, width] image into a
/// [channels*kernel*kernel, out_h*out_w] column matrix.
void im2col(const float* image, int channels, int height, int width, int kernel,
            int stride, int pad, int dilation, float* columns);

/// Transpose of im2col: accumulates a column matrix back into the image
/// gradient buffer (which must be pre-zeroed by the caller).
void col2im(const float* columns, int channels, int height, int width, int kernel,
            int stride, int pad, int dilation, float* image);

}  // namespace crackseg::nn
