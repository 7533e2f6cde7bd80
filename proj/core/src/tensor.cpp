// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace crackseg {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative extent");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.f) {}

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

void Tensor::reshape(std::vector<int> shape) {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("reshape from " + shape_str() + " to " +
                                shape_str(shape) + " changes element count");
  }
  shape_ = std::move(shape);
}

std::string Tensor::shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::string Tensor::shape_str() const { return shape_str(shape_); }

}  // namespace crackseg
