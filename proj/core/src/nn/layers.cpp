// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/nn/layers.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "crackseg/nn/ops.hpp"

namespace crackseg::nn {

namespace {
void expect_4d(const Tensor& x, int channels, const char* who) {
  if (x.ndim() != 4 || x.dim(1) != channels) {
    throw std::invalid_argument(std::string(who) + ": expected [N, " +
                                std::to_string(channels) + ", H, W], got " +
                                x.shape_str());
  }
}
}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride,
               int pad, int dilation, bool bias)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      dilation_(dilation),
      has_bias_(bias),
      weight_({out_channels, in_channels, kernel, kernel}),
      weight_grad_({out_channels, in_channels, kernel, kernel}),
      bias_(bias ? Tensor({out_channels}) : Tensor()),
      bias_grad_(bias ? Tensor({out_channels}) : Tensor()) {}

void Conv2d::init_kaiming(std::mt19937_64& rng) {
  const double fan_out = static_cast<double>(out_channels_) * kernel_ * kernel_;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_out));
  for (int64_t i = 0; i < weight_.numel(); ++i) {
    weight_[i] = static_cast<float>(dist(rng));
  }
  if (has_bias_) bias_.fill(0.f);
}

Tensor Conv2d::forward(const Tensor& x, bool train) {
  expect_4d(x, in_channels_, "Conv2d");
  const int batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = conv_out_extent(h, kernel_, stride_, pad_, dilation_);
  const int ow = conv_out_extent(w, kernel_, stride_, pad_, dilation_);
  if (oh <= 0 || ow <= 0) {
    throw std::invalid_argument("Conv2d: input " + x.shape_str() +
                                " too small for kernel configuration");
  }
  Tensor y({batch, out_channels_, oh, ow});

  const int64_t in_plane = static_cast<int64_t>(in_channels_) * h * w;
  const int64_t out_plane = static_cast<int64_t>(out_channels_) * oh * ow;
  const int cols = oh * ow;
  const int kk = in_channels_ * kernel_ * kernel_;
  const bool pointwise = (kernel_ == 1 && stride_ == 1 && pad_ == 0);
  if (!pointwise) col_.resize(static_cast<size_t>(kk) * cols);

  for (int n = 0; n < batch; ++n) {
    const float* xn = x.data() + n * in_plane;
    float* yn = y.data() + n * out_plane;
    const float* mat = xn;
    if (!pointwise) {
      im2col(xn, in_channels_, h, w, kernel_, stride_, pad_, dilation_, col_.data());
      mat = col_.data();
    }
    sgemm(false, false, out_channels_, cols, kk, 1.f, weight_.data(), kk, mat,
          cols, 0.f, yn, cols);
    if (has_bias_) {
      for (int c = 0; c < out_channels_; ++c) {
        const float b = bias_[c];
        float* plane = yn + static_cast<int64_t>(c) * cols;
        for (int i = 0; i < cols; ++i) plane[i] += b;
      }
    }
  }
  if (train) saved_input_ = x;
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const Tensor& x = saved_input_;
  if (x.empty()) throw std::logic_error("Conv2d::backward without forward(train)");
  const int batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = dy.dim(2), ow = dy.dim(3);
  const int cols = oh * ow;
  const int kk = in_channels_ * kernel_ * kernel_;
  const bool pointwise = (kernel_ == 1 && stride_ == 1 && pad_ == 0);

  Tensor dx;
  if (need_input_grad_) dx = Tensor(x.shape());
  std::vector<float> dcol;
  if (!pointwise) {
    col_.resize(static_cast<size_t>(kk) * cols);
    if (need_input_grad_) dcol.resize(static_cast<size_t>(kk) * cols);
  }

  const int64_t in_plane = static_cast<int64_t>(in_channels_) * h * w;
  const int64_t out_plane = static_cast<int64_t>(out_channels_) * oh * ow;
  for (int n = 0; n < batch; ++n) {
    const float* xn = x.data() + n * in_plane;
    const float* dyn = dy.data() + n * out_plane;
    const float* mat = xn;
    if (!pointwise) {
      im2col(xn, in_channels_, h, w, kernel_, stride_, pad_, dilation_, col_.data());
      mat = col_.data();
    }
    // dW += dy_n * col^T
    sgemm(false, true, out_channels_, kk, cols, 1.f, dyn, cols, mat, cols, 1.f,
          weight_grad_.data(), kk);
    if (need_input_grad_) {
      float* target = pointwise ? dx.data() + n * in_plane : dcol.data();
      // dcol = W^T * dy_n
      sgemm(true, false, kk, cols, out_channels_, 1.f, weight_.data(), kk, dyn,
            cols, 0.f, target, cols);
      if (!pointwise) {
        col2im(dcol.data(), in_channels_, h, w, kernel_, stride_, pad_,
               dilation_, dx.data() + n * in_plane);
      }
    }
    if (has_bias_) {
      for (int c = 0; c < out_channels_; ++c) {
        const float* plane = dyn + static_cast<int64_t>(c) * cols;
        double s = 0.0;
        for (int i = 0; i < cols; ++i) s += plane[i];
        bias_grad_[c] += static_cast<float>(s);
      }
    }
  }
  return dx;
}

void Conv2d::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight_, weight_grad_);
  if (has_bias_) fn(prefix + ".bias", bias_, bias_grad_);
}

void Conv2d::drop_saved() {
  saved_input_ = Tensor();
  col_.clear();
  col_.shrink_to_fit();
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, float momentum, float eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_({channels}, 1.f),
      gamma_grad_({channels}),
      beta_({channels}),
      beta_grad_({channels}),
      running_mean_({channels}),
      running_var_({channels}, 1.f) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
  expect_4d(x, channels_, "BatchNorm2d");
  const int batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t count = static_cast<int64_t>(batch) * plane;
  Tensor y(x.shape());

  if (!train) {
    for (int c = 0; c < channels_; ++c) {
      const float scale = gamma_[c] / std::sqrt(running_var_[c] + eps_);
      const float shift = beta_[c] - running_mean_[c] * scale;
      for (int n = 0; n < batch; ++n) {
        const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * plane;
        const float* src = x.data() + off;
        float* dst = y.data() + off;
        for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * scale + shift;
      }
    }
    return y;
  }

  saved_xhat_ = Tensor(x.shape());
  saved_invstd_.assign(static_cast<size_t>(channels_), 0.f);
  for (int c = 0; c < channels_; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int n = 0; n < batch; ++n) {
      const float* src = x.data() + (static_cast<int64_t>(n) * channels_ + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        sum += src[i];
        sq += static_cast<double>(src[i]) * src[i];
      }
    }
    const double mean = sum / static_cast<double>(count);
    double var = sq / static_cast<double>(count) - mean * mean;
    if (var < 0.0) var = 0.0;  // rounding
    const float invstd = static_cast<float>(1.0 / std::sqrt(var + eps_));
    saved_invstd_[static_cast<size_t>(c)] = invstd;

    const double unbiased = count > 1 ? var * static_cast<double>(count) /
                                            static_cast<double>(count - 1)
                                      : var;
    running_mean_[c] = (1.f - momentum_) * running_mean_[c] +
                       momentum_ * static_cast<float>(mean);
    running_var_[c] = (1.f - momentum_) * running_var_[c] +
                      momentum_ * static_cast<float>(unbiased);

    const float fmean = static_cast<float>(mean);
    const float g = gamma_[c], b = beta_[c];
    for (int n = 0; n < batch; ++n) {
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * plane;
      const float* src = x.data() + off;
      float* xh = saved_xhat_.data() + off;
      float* dst = y.data() + off;
      for (int64_t i = 0; i < plane; ++i) {
        const float v = (src[i] - fmean) * invstd;
        xh[i] = v;
        dst[i] = g * v + b;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  const Tensor& xhat = saved_xhat_;
  if (xhat.empty()) throw std::logic_error("BatchNorm2d::backward without forward(train)");
  const int batch = dy.dim(0), h = dy.dim(2), w = dy.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t count = static_cast<int64_t>(batch) * plane;
  Tensor dx(dy.shape());

  for (int c = 0; c < channels_; ++c) {
    double s_dy = 0.0, s_dy_xhat = 0.0;
    for (int n = 0; n < batch; ++n) {
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * plane;
      const float* g = dy.data() + off;
      const float* xh = xhat.data() + off;
      for (int64_t i = 0; i < plane; ++i) {
        s_dy += g[i];
        s_dy_xhat += static_cast<double>(g[i]) * xh[i];
      }
    }
    gamma_grad_[c] += static_cast<float>(s_dy_xhat);
    beta_grad_[c] += static_cast<float>(s_dy);

    const float mean_dy = static_cast<float>(s_dy / static_cast<double>(count));
    const float mean_dy_xhat =
        static_cast<float>(s_dy_xhat / static_cast<double>(count));
    const float scale = gamma_[c] * saved_invstd_[static_cast<size_t>(c)];
    for (int n = 0; n < batch; ++n) {
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * plane;
      const float* g = dy.data() + off;
      const float* xh = xhat.data() + off;
      float* d = dx.data() + off;
      for (int64_t i = 0; i < plane; ++i) {
        d[i] = scale * (g[i] - mean_dy - xh[i] * mean_dy_xhat);
      }
    }
  }
  return dx;
}

void BatchNorm2d::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", gamma_, gamma_grad_);
  fn(prefix + ".bias", beta_, beta_grad_);
}

void BatchNorm2d::visit_buffers(const std::string& prefix, const BufferVisitor& fn) {
  fn(prefix + ".running_mean", running_mean_);
  fn(prefix + ".running_var", running_var_);
}

void BatchNorm2d::drop_saved() {
  saved_xhat_ = Tensor();
  saved_invstd_.clear();
}

// ---------------------------------------------------------------------------
// ReLU

Tensor ReLU::forward(const Tensor& x, bool train) {
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.f ? x[i] : 0.f;
  if (train) saved_out_ = y;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) const {
  if (saved_out_.empty()) throw std::logic_error("ReLU::backward without forward(train)");
  Tensor dx(dy.shape());
  for (int64_t i = 0; i < dy.numel(); ++i) {
    dx[i] = saved_out_[i] > 0.f ? dy[i] : 0.f;
  }
  return dx;
}

void ReLU::drop_saved() { saved_out_ = Tensor(); }

// ---------------------------------------------------------------------------
// MaxPool2d

MaxPool2d::MaxPool2d(int kernel, int stride, int pad)
    : kernel_(kernel), stride_(stride), pad_(pad) {}

Tensor MaxPool2d::forward(const Tensor& x, bool train) {
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = conv_out_extent(h, kernel_, stride_, pad_, 1);
  const int ow = conv_out_extent(w, kernel_, stride_, pad_, 1);
  Tensor y({batch, channels, oh, ow});
  if (train) {
    input_shape_ = x.shape();
    argmax_.assign(static_cast<size_t>(y.numel()), 0);
  }

  int64_t out_idx = 0;
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const float* plane =
          x.data() + (static_cast<int64_t>(n) * channels + c) * h * w;
      for (int po = 0; po < oh; ++po) {
        const int h0 = po * stride_ - pad_;
        for (int qo = 0; qo < ow; ++qo, ++out_idx) {
          const int w0 = qo * stride_ - pad_;
          float best = -std::numeric_limits<float>::infinity();
          int32_t best_idx = 0;
          for (int kh = 0; kh < kernel_; ++kh) {
            const int ih = h0 + kh;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < kernel_; ++kw) {
              const int iw = w0 + kw;
              if (iw < 0 || iw >= w) continue;
              const float v = plane[ih * w + iw];
              if (v > best) {
                best = v;
                best_idx = ih * w + iw;
              }
            }
          }
          y[out_idx] = best;
          if (train) argmax_[static_cast<size_t>(out_idx)] = best_idx;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& dy) const {
  if (input_shape_.empty()) throw std::logic_error("MaxPool2d::backward without forward(train)");
  Tensor dx(input_shape_);
  const int batch = dy.dim(0), channels = dy.dim(1);
  const int64_t plane =
      static_cast<int64_t>(input_shape_[2]) * input_shape_[3];
  const int64_t out_plane = static_cast<int64_t>(dy.dim(2)) * dy.dim(3);
  int64_t out_idx = 0;
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      float* target = dx.data() + (static_cast<int64_t>(n) * channels + c) * plane;
      for (int64_t i = 0; i < out_plane; ++i, ++out_idx) {
        target[argmax_[static_cast<size_t>(out_idx)]] += dy[out_idx];
      }
    }
  }
  return dx;
}

void MaxPool2d::drop_saved() {
  input_shape_.clear();
  argmax_.clear();
}

}  // namespace crackseg::nn
