// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace crackseg {

/// Dense float32 tensor with row-major (NCHW for 4-d) layout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, float fill);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  void fill(float value);
  /// Reinterpret the buffer with a new shape of identical element count.
  void reshape(std::vector<int> shape);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// "[2, 38, 38]"
  std::string shape_str() const;
  static std::string shape_str(const std::vector<int>& shape);

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

int64_t shape_numel(const std::vector<int>& shape);

}  // namespace crackseg
