// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/metrics.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace crackseg {

void ConfusionMatrix::add(CrackLabel actual, CrackLabel predicted, int64_t n) {
  if (n < 0) {
    throw std::invalid_argument("confusion matrix: negative count");
  }
  counts[static_cast<size_t>(actual)][static_cast<size_t>(predicted)] += n;
}

int64_t ConfusionMatrix::at(CrackLabel actual, CrackLabel predicted) const {
  return counts[static_cast<size_t>(actual)][static_cast<size_t>(predicted)];
}

int64_t ConfusionMatrix::total() const {
  return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1];
}

MetricsReport MetricsReport::from_confusion(const ConfusionMatrix& confusion) {
  const int64_t total = confusion.total();
  if (total <= 0) {
    throw std::invalid_argument("metrics: empty confusion matrix");
  }
  const double tp =
      static_cast<double>(confusion.at(CrackLabel::kCrack, CrackLabel::kCrack));
  const double fp = static_cast<double>(
      confusion.at(CrackLabel::kNonCrack, CrackLabel::kCrack));
  const double fn = static_cast<double>(
      confusion.at(CrackLabel::kCrack, CrackLabel::kNonCrack));
  const double tn = static_cast<double>(
      confusion.at(CrackLabel::kNonCrack, CrackLabel::kNonCrack));

  MetricsReport report;
  report.confusion = confusion;
  report.precision_crack = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
  report.recall_crack = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
  const double pr = report.precision_crack + report.recall_crack;
  report.f1_crack =
      pr > 0.0 ? 2.0 * report.precision_crack * report.recall_crack / pr : 0.0;
  report.accuracy = (tp + tn) / static_cast<double>(total);
  return report;
}

void to_json(nlohmann::json& j, const ConfusionMatrix& m) {
  j = nlohmann::json::array(
      {{m.counts[0][0], m.counts[0][1]}, {m.counts[1][0], m.counts[1][1]}});
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{
      {"precision_crack", r.precision_crack},
      {"recall_crack", r.recall_crack},
      {"f1_crack", r.f1_crack},
      {"accuracy", r.accuracy},
      {"confusion", r.confusion},
  };
}

}  // namespace crackseg
