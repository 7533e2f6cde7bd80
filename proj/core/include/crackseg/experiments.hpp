// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crackseg/config.hpp"
#include "crackseg/metrics.hpp"

namespace crackseg {

/// Outcome of one (p, repeat) training run inside a sweep.
struct SweepCell {
  double p = 1.0;
  int repeat = 0;
  uint64_t seed = 0;
  bool ok = false;
  std::string error;  // set when ok is false
  MetricsReport test_metrics{};
  double best_val_loss = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
  std::string checkpoint;  // relative to the sweep directory
};

struct SweepReport {
  std::vector<SweepCell> cells;
  uint64_t split_digest = 0;
  bool complete = false;
};

/// Loads the dataset and computes the split exactly as run_sweep does, so
/// every consumer of one config sees one split. Requires data.root.
std::pair<Dataset, DatasetSplit> load_and_split(const ExperimentConfig& config);

/// Trains one model per (p, repeat) on a single shared split, evaluates
/// on the test split, and persists per-run checkpoints and histories plus
/// report.json / report.txt (metric rows, one column per p) under
/// out_dir. Failed runs are recorded and the sweep continues; the report
/// marks incomplete columns. No timestamps anywhere, so identical inputs
/// reproduce identical reports.
SweepReport run_sweep(const ExperimentConfig& config,
                      const std::filesystem::path& out_dir);

/// Runs exactly one (p, repeat) cell of the sweep: same dataset load and
/// split as run_sweep, one training run, artifacts plus a cell.json
/// record under out_dir/p<p>/run<repeat>/. This is the unit the parallel
/// sweep driver executes in isolated processes; cells touch disjoint
/// directories and never the shared report.
SweepCell run_sweep_cell(const ExperimentConfig& config,
                         const std::filesystem::path& out_dir, double p,
                         int repeat);

/// Assembles report.json / report.txt from the cell.json records of a
/// finished (possibly parallel) sweep. A missing or stale cell record is
/// reported as a failed run; stale means its split checksum differs from
/// the one the config produces now.
SweepReport collect_sweep_report(const ExperimentConfig& config,
                                 const std::filesystem::path& out_dir);

struct PanelResult {
  std::vector<std::filesystem::path> written;
  std::vector<double> skipped_p;  // requested exponents lacking a checkpoint
};

/// Renders, per input image, the original plus one min-max normalized
/// heatmap per available checkpoint (dark = low, bright = high; an
/// all-equal map renders mid-gray) and, when overlay is set, the gated
/// segmentation mask as a third file. Missing checkpoints are listed and
/// skipped.
PanelResult emit_panel(
    const std::map<double, std::filesystem::path>& checkpoints,
    const std::vector<std::filesystem::path>& images,
    const std::filesystem::path& out_dir, bool overlay,
    const std::string& polarity = "auto");

}  // namespace crackseg
