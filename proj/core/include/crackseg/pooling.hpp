// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crackseg {

/// Exponent and numerical guards for normalized L_p pooling.
///
/// p must be finite and >= 1, or infinity (max pooling). epsilon guards the
/// backward pass against all-zero maps and must lie in (0, 1e-6).
struct PoolingSpec {
  double p = 1.0;
  double epsilon = 1e-12;

  static constexpr double kInfinity = std::numeric_limits<double>::infinity();

  static PoolingSpec lp(double p, double epsilon = 1e-12);
  static PoolingSpec max_pool(double epsilon = 1e-12) { return lp(kInfinity, epsilon); }

  bool is_max() const { return std::isinf(p); }

  /// Throws std::invalid_argument if p or epsilon is out of range.
  void validate() const;

  /// "1", "1.5" or "inf"; used in file names and reports.
  std::string p_str() const;
};

/// Parses "inf" / "Inf" / "INF" or a decimal number into an exponent.
/// Returns nullopt on garbage input; range checking is left to validate().
std::optional<double> parse_exponent(const std::string& text);

/// Normalized L_p aggregation of a flattened activation map into one scalar:
/// the p-th power mean of the absolute values, max for the infinity case.
///
/// The reduction factors out the largest magnitude so that large exponents
/// do not overflow; an all-zero map pools to 0. Non-finite entries and
/// invalid specs are rejected with std::invalid_argument.
double lp_pool_forward(std::span<const double> map, const PoolingSpec& spec);

/// Gradient of lp_pool_forward with respect to each map entry, scaled by
/// `upstream`.
///
/// Finite p:    d/dy_i = (1/N) * sign(y_i) * (|y_i| / L)^(p-1)
/// with L replaced by max(L, epsilon) so all-zero maps yield a zero
/// gradient instead of 0/0. p == 1 reduces to sign(y_i)/N (average
/// pooling). The infinity case routes the entire upstream value to the
/// first (scan-order) entry of largest magnitude, like max-pooling.
std::vector<double> lp_pool_backward(std::span<const double> map,
                                     const PoolingSpec& spec, double upstream);

/// float convenience overloads used by the network head; computation is
/// carried out in double.
double lp_pool_forward(std::span<const float> map, const PoolingSpec& spec);
void lp_pool_backward(std::span<const float> map, const PoolingSpec& spec,
                      double upstream, std::span<float> grad_out);

}  // namespace crackseg
