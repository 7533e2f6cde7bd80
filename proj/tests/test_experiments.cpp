// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crackseg/config.hpp"
#include "crackseg/data.hpp"
#include "crackseg/experiments.hpp"
#include "crackseg/model.hpp"
#include "crackseg/pooling.hpp"
#include "crackseg/synthetic.hpp"
#include "doctest.h"
#include "support.hpp"

using crackseg::build_model;
using crackseg::collect_sweep_report;
using crackseg::Dataset;
using crackseg::DatasetSplit;
using crackseg::emit_panel;
using crackseg::ExperimentConfig;
using crackseg::fnv1a64_file;
using crackseg::format_p_list;
using crackseg::kChannelMean;
using crackseg::kChannelStd;
using crackseg::load_and_split;
using crackseg::load_experiment_config;
using crackseg::Model;
using crackseg::ModelConfig;
using crackseg::PanelResult;
using crackseg::parse_p_list;
using crackseg::PoolingSpec;
using crackseg::preprocess_image;
using crackseg::run_sweep;
using crackseg::run_sweep_cell;
using crackseg::save_experiment_config;
using crackseg::SweepCell;
using crackseg::SweepReport;
using crackseg::SyntheticSet;
using crackseg::SyntheticSpec;
using crackseg::Tensor;
using crackseg::write_synthetic_set;
using testsupport::capture_error;
using testsupport::contains;
using testsupport::TempDir;

namespace {

constexpr double kInf = PoolingSpec::kInfinity;

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

SyntheticSet make_set(const std::filesystem::path& root, int count,
                      uint64_t seed) {
  SyntheticSpec spec;
  spec.count = count;
  spec.image_size = 32;
  spec.seed = seed;
  return write_synthetic_set(root, spec);
}

ExperimentConfig sweep_config(const SyntheticSet& set) {
  ExperimentConfig cfg;
  cfg.data.root = set.root.string();
  cfg.data.labels_file = set.labels_file.string();
  cfg.model.input_size = 32;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 4;
  cfg.train.learning_rate = 1e-4;
  cfg.train.seed = 5;
  cfg.train.early_stop_patience = 0;
  cfg.sweep.p_values = {1.0, kInf};
  cfg.sweep.repeats = 1;
  return cfg;
}

}  // namespace

TEST_SUITE("experiments") {

TEST_CASE("p lists parse validate and render") {
  const auto values = parse_p_list("1,2,3,9,inf");
  REQUIRE(values.size() == 5);
  CHECK(values[0] == 1.0);
  CHECK(values[3] == 9.0);
  CHECK(std::isinf(values[4]));

  const auto spaced = parse_p_list(" 1 , inf ");
  REQUIRE(spaced.size() == 2);
  CHECK(spaced[1] == kInf);

  CHECK(contains(capture_error([] { parse_p_list("1,banana"); }),
                 "unparsable exponent"));
  CHECK(contains(capture_error([] { parse_p_list("0.5"); }), "p must be >= 1"));
  CHECK(contains(capture_error([] { parse_p_list(" , "); }), "empty p list"));

  CHECK(format_p_list({1.0, 2.5, kInf}) == "1, 2.5, inf");
}

TEST_CASE("experiment configs survive a json round trip byte for byte") {
  TempDir tmp("config");
  ExperimentConfig cfg;
  cfg.data.root = "/data/elpv";
  cfg.data.split_seed = 9;
  cfg.model.input_size = 64;
  cfg.model.pooling = PoolingSpec::lp(2.5);
  cfg.train.epochs = 3;
  cfg.sweep.p_values = {1.0, 2.5, kInf};
  cfg.sweep.repeats = 2;
  cfg.output_dir = "runs/demo";

  const auto path = tmp.path() / "config.json";
  save_experiment_config(cfg, path);
  const ExperimentConfig loaded = load_experiment_config(path);

  CHECK(loaded.data.root == cfg.data.root);
  CHECK(loaded.data.split_seed == cfg.data.split_seed);
  CHECK(loaded.model.input_size == cfg.model.input_size);
  CHECK(loaded.model.pooling.p == cfg.model.pooling.p);
  CHECK(format_p_list(loaded.sweep.p_values) ==
        format_p_list(cfg.sweep.p_values));
  CHECK(loaded.sweep.repeats == 2);
  CHECK(loaded.output_dir == cfg.output_dir);

  const auto again = tmp.path() / "config2.json";
  save_experiment_config(loaded, again);
  CHECK(slurp(path) == slurp(again));

  CHECK(contains(
      capture_error([&] { load_experiment_config(tmp.path() / "nope.json"); }),
      "not found"));
  std::ofstream(tmp.path() / "broken.json") << "{ not json";
  CHECK_FALSE(
      capture_error([&] { load_experiment_config(tmp.path() / "broken.json"); })
          .empty());
}

TEST_CASE("synthetic generation is deterministic per seed") {
  TempDir tmp("synth-det");
  const auto a = make_set(tmp.path() / "a", 8, 123);
  const auto b = make_set(tmp.path() / "b", 8, 123);
  const auto c = make_set(tmp.path() / "c", 8, 124);

  REQUIRE(a.samples.size() == b.samples.size());
  bool any_difference = false;
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].path == b.samples[i].path);
    CHECK(fnv1a64_file(a.root / a.samples[i].path) ==
          fnv1a64_file(b.root / b.samples[i].path));
    any_difference = any_difference ||
                     fnv1a64_file(a.root / a.samples[i].path) !=
                         fnv1a64_file(c.root / c.samples[i].path);
  }
  CHECK(any_difference);
}

TEST_CASE("load_and_split is the one split every consumer sees") {
  TempDir tmp("shared-split");
  const auto set = make_set(tmp.path() / "data", 16, 55);
  const ExperimentConfig cfg = sweep_config(set);

  const auto [dataset_a, split_a] = load_and_split(cfg);
  const auto [dataset_b, split_b] = load_and_split(cfg);
  CHECK(dataset_a.samples.size() == 16);
  CHECK(crackseg::split_checksum(split_a) == crackseg::split_checksum(split_b));

  ExperimentConfig reseeded = cfg;
  reseeded.data.split_seed = cfg.data.split_seed + 1;
  const auto [dataset_c, split_c] = load_and_split(reseeded);
  CHECK(crackseg::split_checksum(split_a) != crackseg::split_checksum(split_c));

  ExperimentConfig rootless = cfg;
  rootless.data.root.clear();
  CHECK_FALSE(capture_error([&] { load_and_split(rootless); }).empty());
}

TEST_CASE("a small sweep produces the full artifact tree") {
  TempDir tmp("sweep");
  const auto set = make_set(tmp.path() / "data", 16, 56);
  const ExperimentConfig cfg = sweep_config(set);
  const auto out_a = tmp.path() / "outA";
  const auto out_b = tmp.path() / "outB";

  const SweepReport report = run_sweep(cfg, out_a);
  CHECK(report.complete);
  REQUIRE(report.cells.size() == 2);
  for (const SweepCell& cell : report.cells) {
    CHECK(cell.ok);
    CHECK(cell.epochs_run == 1);
    CHECK(cell.seed == cfg.train.seed);
  }

  for (const char* name : {"report.json", "report.txt", "config.json"}) {
    CHECK_MESSAGE(std::filesystem::exists(out_a / name), name);
  }
  for (const char* run_dir : {"p1/run0", "pinf/run0"}) {
    for (const char* artifact : {"checkpoint.ckpt", "history.jsonl", "cell.json"}) {
      const std::string where = std::string(run_dir) + "/" + artifact;
      CHECK_MESSAGE(std::filesystem::exists(out_a / run_dir / artifact), where);
    }
  }

  const auto j = nlohmann::json::parse(slurp(out_a / "report.json"));
  CHECK(j.at("complete") == true);
  CHECK(j.at("p_values") == nlohmann::json::array({"1", "inf"}));
  REQUIRE(j.at("runs").size() == 2);
  // Both exponents consumed the identical split.
  CHECK(j.at("runs")[0].at("split_checksum") ==
        j.at("runs")[1].at("split_checksum"));
  CHECK(j.at("runs")[0].at("split_checksum") ==
        j.at("split").at("checksum"));
  for (const auto& run : j.at("runs")) {
    CHECK(run.at("ok") == true);
    CHECK(run.at("metrics").contains("f1_crack"));
    CHECK(run.at("metrics").at("confusion").size() == 2);
  }
  CHECK(j.at("aggregate").at("1").at("accuracy").at("runs") == 1);
  CHECK(j.at("aggregate").at("inf").at("accuracy").at("runs") == 1);

  // The same config and seed reproduce the report byte for byte.
  const SweepReport repeat = run_sweep(cfg, out_b);
  CHECK(repeat.complete);
  CHECK(slurp(out_a / "report.json") == slurp(out_b / "report.json"));
  CHECK(slurp(out_a / "report.txt") == slurp(out_b / "report.txt"));

  // Collecting from cell records alone rebuilds the identical report.
  std::filesystem::remove(out_a / "report.json");
  std::filesystem::remove(out_a / "report.txt");
  const SweepReport collected = collect_sweep_report(cfg, out_a);
  CHECK(collected.complete);
  CHECK(slurp(out_a / "report.json") == slurp(out_b / "report.json"));

  // A lost cell record turns into a reported failure, not a crash.
  std::filesystem::remove(out_a / "p1" / "run0" / "cell.json");
  const SweepReport partial = collect_sweep_report(cfg, out_a);
  CHECK_FALSE(partial.complete);
  REQUIRE(partial.cells.size() == 2);
  bool found_missing = false;
  for (const SweepCell& cell : partial.cells) {
    if (!cell.ok) {
      found_missing = true;
      CHECK(contains(cell.error, "no result recorded"));
    }
  }
  CHECK(found_missing);
}

TEST_CASE("single cells run in isolation and rejoin at collect time") {
  TempDir tmp("cells");
  const auto set = make_set(tmp.path() / "data", 16, 57);
  const ExperimentConfig cfg = sweep_config(set);
  const auto out = tmp.path() / "out";

  const SweepCell inf_cell = run_sweep_cell(cfg, out, kInf, 0);
  CHECK(inf_cell.ok);
  CHECK(std::filesystem::exists(out / "pinf" / "run0" / "cell.json"));

  // Only half the grid has results, so the collected report is partial.
  SweepReport report = collect_sweep_report(cfg, out);
  CHECK_FALSE(report.complete);

  const SweepCell one_cell = run_sweep_cell(cfg, out, 1.0, 0);
  CHECK(one_cell.ok);
  report = collect_sweep_report(cfg, out);
  CHECK(report.complete);

  CHECK(contains(capture_error([&] { run_sweep_cell(cfg, out, 1.0, 5); }),
                 "out of range"));
  CHECK(contains(capture_error([&] { run_sweep_cell(cfg, out, 0.5, 0); }),
                 "p must be >= 1"));
}

TEST_CASE("panels render one heatmap per checkpoint plus the original") {
  TempDir tmp("panel");
  const auto set = make_set(tmp.path() / "data", 16, 58);
  const ExperimentConfig cfg = sweep_config(set);
  const auto sweep_out = tmp.path() / "sweep";
  const SweepReport report = run_sweep(cfg, sweep_out);
  REQUIRE(report.complete);

  std::map<double, std::filesystem::path> checkpoints{
      {1.0, sweep_out / "p1" / "run0" / "checkpoint.ckpt"},
      {kInf, sweep_out / "pinf" / "run0" / "checkpoint.ckpt"},
  };
  const std::vector<std::filesystem::path> images{set.root /
                                                  set.samples.front().path};
  const auto panel_out = tmp.path() / "panel";

  const PanelResult plain = emit_panel(checkpoints, images, panel_out, false);
  CHECK(plain.written.size() == 3);
  CHECK(plain.skipped_p.empty());
  int originals = 0;
  int heatmaps = 0;
  for (const auto& path : plain.written) {
    if (contains(path.filename().string(), "_original")) ++originals;
    if (contains(path.filename().string(), "_L")) ++heatmaps;
  }
  CHECK(originals == 1);
  CHECK(heatmaps == 2);

  // Overlays need a polarity; p = 1 has no default.
  CHECK(contains(capture_error([&] {
                   emit_panel(checkpoints, images, tmp.path() / "panel2", true);
                 }),
                 "no default polarity"));

  const PanelResult overlaid =
      emit_panel(checkpoints, images, tmp.path() / "panel3", true, "direct");
  CHECK(overlaid.written.size() == 5);

  // A dangling checkpoint path is skipped and reported, not fatal.
  checkpoints[2.0] = sweep_out / "p2" / "run0" / "checkpoint.ckpt";
  const PanelResult partial =
      emit_panel(checkpoints, images, tmp.path() / "panel4", false);
  CHECK(partial.written.size() == 3);
  REQUIRE(partial.skipped_p.size() == 1);
  CHECK(partial.skipped_p[0] == 2.0);

  CHECK_FALSE(
      capture_error([&] { emit_panel(checkpoints, {}, panel_out, false); })
          .empty());
  const std::map<double, std::filesystem::path> gone{
      {1.0, tmp.path() / "missing.ckpt"}};
  CHECK(contains(
      capture_error([&] { emit_panel(gone, images, panel_out, false); }),
      "none of the requested checkpoints"));
}

TEST_CASE("an all-equal heatmap renders mid-gray") {
  TempDir tmp("panel-gray");
  const auto set = make_set(tmp.path() / "data", 8, 59);

  // A zeroed head emits constant activation maps for any input.
  ModelConfig cfg;
  cfg.input_size = 32;
  cfg.pooling = PoolingSpec::lp(kInf);
  cfg.seed = 3;
  Model model = build_model(cfg);
  model.head().visit_params("head",
                            [](const std::string&, Tensor& value, Tensor&) {
                              std::fill(value.data(),
                                        value.data() + value.numel(), 0.0f);
                            });
  const auto ckpt = tmp.path() / "flat.ckpt";
  model.save_checkpoint(ckpt);

  const std::vector<std::filesystem::path> images{set.root /
                                                  set.samples.front().path};
  const PanelResult panel = emit_panel({{kInf, ckpt}}, images,
                                       tmp.path() / "panel", false);
  REQUIRE(panel.written.size() == 2);

  std::filesystem::path heatmap_path;
  for (const auto& path : panel.written) {
    if (contains(path.filename().string(), "_Linf")) heatmap_path = path;
  }
  REQUIRE_FALSE(heatmap_path.empty());

  const Tensor decoded = preprocess_image(heatmap_path, 32);
  for (int i = 0; i < 32 * 32; ++i) {
    const float gray =
        (decoded.data()[i] * kChannelStd[0] + kChannelMean[0]) * 255.0f;
    CHECK(std::abs(gray - 128.0f) <= 1.0f);
  }
}

}  // TEST_SUITE
