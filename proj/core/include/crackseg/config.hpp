// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "crackseg/data.hpp"
#include "crackseg/model.hpp"
#include "crackseg/train.hpp"

namespace crackseg {

struct DataConfig {
  std::string root;
  std::string labels_file;
  LabelPolicy policy = LabelPolicy::kStrict;
  SplitRatios split{};
  uint64_t split_seed = 0;
  /// Keep all cells of one physical module in the same split; requires
  /// module_map since the public index carries no module ids.
  bool split_by_module = false;
  std::string module_map;

  void validate() const;
};

struct SweepSettings {
  std::vector<double> p_values{1, 2, 3, 4, 5, 9, PoolingSpec::kInfinity};
  int repeats = 1;

  void validate() const;
};

struct SegmentSettings {
  /// "direct", "inverted" or "auto" (exponent-based default; errors for
  /// small p where no default exists).
  std::string polarity = "auto";

  void validate() const;
};

/// One hierarchical config file drives every subcommand; CLI flags
/// override file values and the resolved result is persisted next to the
/// run outputs.
struct ExperimentConfig {
  DataConfig data{};
  ModelConfig model{};
  TrainConfig train{};
  SweepSettings sweep{};
  SegmentSettings segment{};
  std::string output_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const DataConfig& cfg);
void from_json(const nlohmann::json& j, DataConfig& cfg);
void to_json(nlohmann::json& j, const SweepSettings& cfg);
void from_json(const nlohmann::json& j, SweepSettings& cfg);
void to_json(nlohmann::json& j, const SegmentSettings& cfg);
void from_json(const nlohmann::json& j, SegmentSettings& cfg);
void to_json(nlohmann::json& j, const ExperimentConfig& cfg);
void from_json(const nlohmann::json& j, ExperimentConfig& cfg);

/// Reads and validates a config file; unknown top-level keys are warned
/// about, never silently dropped.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Stable on-disk form of the resolved config (sorted keys, 2-space
/// indent, trailing newline), reproducible byte for byte.
void save_experiment_config(const ExperimentConfig& cfg,
                            const std::filesystem::path& path);

/// Parses a comma-separated exponent list such as "1,2,3,9,inf".
std::vector<double> parse_p_list(const std::string& text);

/// "1, 2, inf" rendering used in logs and reports.
std::string format_p_list(const std::vector<double>& p_values);

}  // namespace crackseg
