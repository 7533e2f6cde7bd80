// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/nn/ops.hpp"

#include <cblas.h>

namespace crackseg::nn {

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

void im2col(const float* image, int channels, int height, int width, int kernel,
            int stride, int pad, int dilation, float* columns) {
  const int out_h = conv_out_extent(height, kernel, stride, pad, dilation);
  const int out_w = conv_out_extent(width, kernel, stride, pad, dilation);
  float* col = columns;
  for (int c = 0; c < channels; ++c) {
    const float* src = image + static_cast<int64_t>(c) * height * width;
    for (int kh = 0; kh < kernel; ++kh) {
      for (int kw = 0; kw < kernel; ++kw) {
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + kh * dilation;
          if (ih < 0 || ih >= height) {
            for (int ow = 0; ow < out_w; ++ow) *col++ = 0.f;
            continue;
          }
          const float* row = src + static_cast<int64_t>(ih) * width;
          int iw = -pad + kw * dilation;
          for (int ow = 0; ow < out_w; ++ow, iw += stride) {
            *col++ = (iw >= 0 && iw < width) ? row[iw] : 0.f;
          }
        }
      }
    }
  }
}

void col2im(const float* columns, int channels, int height, int width, int kernel,
            int stride, int pad, int dilation, float* image) {
  const int out_h = conv_out_extent(height, kernel, stride, pad, dilation);
  const int out_w = conv_out_extent(width, kernel, stride, pad, dilation);
  const float* col = columns;
  for (int c = 0; c < channels; ++c) {
    float* dst = image + static_cast<int64_t>(c) * height * width;
    for (int kh = 0; kh < kernel; ++kh) {
      for (int kw = 0; kw < kernel; ++kw) {
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + kh * dilation;
          if (ih < 0 || ih >= height) {
            col += out_w;
            continue;
          }
          float* row = dst + static_cast<int64_t>(ih) * width;
          int iw = -pad + kw * dilation;
          for (int ow = 0; ow < out_w; ++ow, iw += stride) {
            if (iw >= 0 && iw < width) row[iw] += *col;
            ++col;
          }
        }
      }
    }
  }
}

}  // namespace crackseg::nn
