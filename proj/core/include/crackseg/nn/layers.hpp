// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "crackseg/tensor.hpp"

namespace crackseg::nn {

/// Callback over trainable parameters: (name, value, gradient).
using ParamVisitor = std::function<void(const std::string&, Tensor&, Tensor&)>;
/// Callback over non-trainable state (batch-norm running statistics).
using BufferVisitor = std::function<void(const std::string&, Tensor&)>;

/// 2-d convolution over NCHW batches, im2col + GEMM. No bias unless asked;
/// weights are [out, in, k, k].
class Conv2d {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1,
         int pad = 0, int dilation = 1, bool bias = false);

  Tensor forward(const Tensor& x, bool train);
  /// Accumulates parameter gradients and returns dL/dx (empty when the
  /// layer was told its input gradient is not needed).
  Tensor backward(const Tensor& dy);

  void visit_params(const std::string& prefix, const ParamVisitor& fn);
  void init_kaiming(std::mt19937_64& rng);
  void drop_saved();

  /// Stem convolutions sit on the input image and can skip dx.
  void set_need_input_grad(bool v) { need_input_grad_ = v; }

  int out_channels() const { return out_channels_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }

 private:
  int in_channels_, out_channels_, kernel_, stride_, pad_, dilation_;
  bool has_bias_;
  bool need_input_grad_ = true;
  Tensor weight_, weight_grad_;
  Tensor bias_, bias_grad_;
  Tensor saved_input_;
  std::vector<float> col_;  // im2col scratch, reused across calls
};

/// Per-channel batch normalization with running statistics.
class BatchNorm2d {
 public:
  explicit BatchNorm2d(int channels, float momentum = 0.1f, float eps = 1e-5f);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);

  void visit_params(const std::string& prefix, const ParamVisitor& fn);
  void visit_buffers(const std::string& prefix, const BufferVisitor& fn);
  void set_momentum(float m) { momentum_ = m; }
  void drop_saved();

 private:
  int channels_;
  float momentum_, eps_;
  Tensor gamma_, gamma_grad_, beta_, beta_grad_;
  Tensor running_mean_, running_var_;
  Tensor saved_xhat_;
  std::vector<float> saved_invstd_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy) const;
  void drop_saved();

 private:
  Tensor saved_out_;
};

/// Max pooling with argmax bookkeeping for the backward pass.
class MaxPool2d {
 public:
  MaxPool2d(int kernel, int stride, int pad);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy) const;
  void drop_saved();

 private:
  int kernel_, stride_, pad_;
  std::vector<int> input_shape_;
  std::vector<int32_t> argmax_;
};

}  // namespace crackseg::nn
