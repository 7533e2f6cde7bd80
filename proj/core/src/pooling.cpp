// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/pooling.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace crackseg {

namespace {

void check_map(std::span<const double> map) {
  if (map.empty()) throw std::invalid_argument("pooling input map is empty");
  for (size_t i = 0; i < map.size(); ++i) {
    if (!std::isfinite(map[i])) {
      std::ostringstream os;
      os << "pooling input contains non-finite value " << map[i]
         << " at index " << i;
      throw std::invalid_argument(os.str());
    }
  }
}

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

}  // namespace

PoolingSpec PoolingSpec::lp(double p, double epsilon) {
  PoolingSpec spec{p, epsilon};
  spec.validate();
  return spec;
}

void PoolingSpec::validate() const {
  if (std::isnan(p) || p < 1.0) {
    std::ostringstream os;
    os << "pooling exponent p must be >= 1 or infinity, got " << p;
    throw std::invalid_argument(os.str());
  }
  if (!(epsilon > 0.0) || !(epsilon < 1e-6)) {
    std::ostringstream os;
    os << "pooling epsilon must lie in (0, 1e-6), got " << epsilon;
    throw std::invalid_argument(os.str());
  }
}

std::string PoolingSpec::p_str() const {
  if (is_max()) return "inf";
  std::ostringstream os;
  os << p;
  return os.str();
}

std::optional<double> parse_exponent(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "inf" || t == "infinity") return PoolingSpec::kInfinity;
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end == t.c_str() || *end != '\0') return std::nullopt;
  return v;
}

double lp_pool_forward(std::span<const double> map, const PoolingSpec& spec) {
  spec.validate();
  check_map(map);
  const size_t n = map.size();

  double peak = 0.0;
  for (double v : map) peak = std::max(peak, std::abs(v));
  if (spec.is_max() || peak == 0.0) return peak;

  if (spec.p == 1.0) {
    double sum = 0.0;
    for (double v : map) sum += std::abs(v);
    return sum / static_cast<double>(n);
  }

  // Factor out the peak so |y_i/peak|^p stays in [0, 1] for any p.
  double sum = 0.0;
  for (double v : map) sum += std::pow(std::abs(v) / peak, spec.p);
  return peak * std::pow(sum / static_cast<double>(n), 1.0 / spec.p);
}

std::vector<double> lp_pool_backward(std::span<const double> map,
                                     const PoolingSpec& spec, double upstream) {
  spec.validate();
  check_map(map);
  const size_t n = map.size();
  std::vector<double> grad(n, 0.0);

  if (spec.is_max()) {
    // Max-pooling backprop: everything goes to the first argmax of |y|.
    size_t arg = 0;
    double peak = std::abs(map[0]);
    for (size_t i = 1; i < n; ++i) {
      const double a = std::abs(map[i]);
      if (a > peak) {
        peak = a;
        arg = i;
      }
    }
    grad[arg] = upstream * sign(map[arg]);
    return grad;
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  if (spec.p == 1.0) {
    for (size_t i = 0; i < n; ++i) grad[i] = upstream * sign(map[i]) * inv_n;
    return grad;
  }

  const double pooled = lp_pool_forward(map, spec);
  const double denom = std::max(pooled, spec.epsilon);
  for (size_t i = 0; i < n; ++i) {
    const double ratio = std::abs(map[i]) / denom;
    grad[i] = upstream * inv_n * sign(map[i]) * std::pow(ratio, spec.p - 1.0);
  }
  return grad;
}

double lp_pool_forward(std::span<const float> map, const PoolingSpec& spec) {
  std::vector<double> tmp(map.begin(), map.end());
  return lp_pool_forward(std::span<const double>(tmp), spec);
}

void lp_pool_backward(std::span<const float> map, const PoolingSpec& spec,
                      double upstream, std::span<float> grad_out) {
  if (grad_out.size() != map.size()) {
    throw std::invalid_argument("lp_pool_backward: grad buffer size mismatch");
  }
  std::vector<double> tmp(map.begin(), map.end());
  const std::vector<double> g =
      lp_pool_backward(std::span<const double>(tmp), spec, upstream);
  for (size_t i = 0; i < g.size(); ++i) grad_out[i] = static_cast<float>(g[i]);
}

}  // namespace crackseg
