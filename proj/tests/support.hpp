// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared helpers for the test suites: RAII temp directories, seeded map
// generators, and independent reference implementations used as oracles
// against the library code.

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "crackseg/pooling.hpp"

namespace testsupport {

/// Creates a unique directory under the system temp root and removes it
/// recursively on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::string tmpl =
        (std::filesystem::temp_directory_path() / (tag + ".XXXXXX")).string();
    if (::mkdtemp(tmpl.data()) == nullptr) {
      throw std::runtime_error("mkdtemp failed for " + tmpl);
    }
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Uniform random activation map with entries in [lo, hi].
inline std::vector<double> random_map(std::mt19937_64& rng, size_t n, double lo,
                                      double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> map(n);
  for (double& v : map) v = dist(rng);
  return map;
}

/// Textbook normalized L_p evaluated in extended precision without the
/// peak-factoring trick, so it fails independently of the library when
/// the stabilized path is wrong. Valid while mean |y|^p fits long double
/// range; |y| <= 1e3 with p <= 64 stays below 1e192.
inline double naive_lp(std::span<const double> map, double p) {
  if (std::isinf(p)) {
    long double peak = 0.0L;
    for (double v : map) {
      const long double a = std::fabs(static_cast<long double>(v));
      if (a > peak) peak = a;
    }
    return static_cast<double>(peak);
  }
  long double sum = 0.0L;
  for (double v : map) {
    sum += std::pow(std::fabs(static_cast<long double>(v)),
                    static_cast<long double>(p));
  }
  sum /= static_cast<long double>(map.size());
  return static_cast<double>(std::pow(sum, 1.0L / static_cast<long double>(p)));
}

/// Central-difference derivative of the library forward with respect to
/// component i.
inline double fd_gradient(std::vector<double> map,
                          const crackseg::PoolingSpec& spec, size_t i,
                          double step) {
  const double saved = map[i];
  map[i] = saved + step;
  const double hi = crackseg::lp_pool_forward(map, spec);
  map[i] = saved - step;
  const double lo = crackseg::lp_pool_forward(map, spec);
  return (hi - lo) / (2.0 * step);
}

/// Largest relative gradient error of one map, normalized by the biggest
/// finite-difference component so near-zero components do not divide
/// rounding noise by itself.
inline double max_gradient_error(const std::vector<double>& map,
                                 const crackseg::PoolingSpec& spec,
                                 double step) {
  const std::vector<double> analytic =
      crackseg::lp_pool_backward(map, spec, 1.0);
  std::vector<double> fd(map.size());
  double scale = 0.0;
  for (size_t i = 0; i < map.size(); ++i) {
    fd[i] = fd_gradient(map, spec, i, step);
    scale = std::max(scale, std::abs(fd[i]));
  }
  scale = std::max(scale, 1e-8);
  double worst = 0.0;
  for (size_t i = 0; i < map.size(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / scale);
  }
  return worst;
}

/// Runs fn and returns the exception message, empty when nothing threw.
template <typename Fn>
inline std::string capture_error(Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

inline bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

}  // namespace testsupport
