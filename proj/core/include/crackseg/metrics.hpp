// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>

#include <nlohmann/json_fwd.hpp>

#include "crackseg/model.hpp"

namespace crackseg {

/// 2x2 counts indexed [actual][predicted] with the class order
/// {crack, non-crack}.
struct ConfusionMatrix {
  std::array<std::array<int64_t, 2>, 2> counts{};

  void add(CrackLabel actual, CrackLabel predicted, int64_t n = 1);
  int64_t at(CrackLabel actual, CrackLabel predicted) const;
  int64_t total() const;
};

/// Precision, recall and F1 are measured on class 'crack'; accuracy over
/// all samples. Degenerate denominators follow the zero convention:
/// precision and recall are 0 when undefined, and F1 is 0 when
/// precision + recall is 0.
struct MetricsReport {
  double precision_crack = 0.0;
  double recall_crack = 0.0;
  double f1_crack = 0.0;
  double accuracy = 0.0;
  ConfusionMatrix confusion{};

  static MetricsReport from_confusion(const ConfusionMatrix& confusion);
};

void to_json(nlohmann::json& j, const ConfusionMatrix& m);
void to_json(nlohmann::json& j, const MetricsReport& r);

}  // namespace crackseg
