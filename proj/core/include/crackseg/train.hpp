// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "crackseg/data.hpp"
#include "crackseg/metrics.hpp"
#include "crackseg/model.hpp"

namespace crackseg {

enum class OptimizerKind { kAdam, kSgd };
const char* to_string(OptimizerKind kind);
std::optional<OptimizerKind> parse_optimizer(const std::string& text);

enum class SelectionCriterion { kValLoss, kValF1 };
const char* to_string(SelectionCriterion criterion);
std::optional<SelectionCriterion> parse_selection(const std::string& text);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  uint64_t seed = 0;
  /// Epochs without improvement of the selection criterion before
  /// stopping; 0 disables early stopping.
  int early_stop_patience = 10;
  SelectionCriterion selection = SelectionCriterion::kValLoss;
  bool balance = true;
  bool augment = true;
  /// When positive, training stops once the running train accuracy of an
  /// epoch reaches this value and an evaluation pass confirms it; the
  /// confirmed weights are kept instead of the best-validation snapshot.
  double stop_at_train_accuracy = 0.0;

  /// learning_rate 0 is legal (optimizer identity); negatives are not.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  MetricsReport val_metrics{};
  bool is_best = false;
};

nlohmann::json epoch_record_json(const EpochRecord& record);

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_val_loss = 0.0;
  MetricsReport best_val_metrics{};
  bool stopped_early = false;
  bool reached_target_accuracy = false;
};

/// Minimizes categorical cross entropy over the two pooled scores.
/// Tracks validation metrics per epoch, restores the best weights per the
/// selection criterion (unless the train-accuracy target fired) and
/// appends one JSON line per epoch to history_path when given. Non-finite
/// loss aborts with the offending epoch and batch index.
TrainResult train(Model& model, const std::filesystem::path& data_root,
                  const DatasetSplit& split, const TrainConfig& config,
                  const std::filesystem::path* history_path = nullptr);

/// Confusion-matrix metrics of classify() over the samples, eval mode.
MetricsReport evaluate(Model& model, const std::filesystem::path& data_root,
                       const std::vector<ImageSample>& samples,
                       int batch_size = 8);

/// Mean cross-entropy plus metrics in one pass; used for validation.
struct EvalResult {
  double loss = 0.0;
  MetricsReport metrics{};
};
EvalResult evaluate_loss(Model& model, const std::filesystem::path& data_root,
                         const std::vector<ImageSample>& samples,
                         int batch_size = 8);

}  // namespace crackseg
