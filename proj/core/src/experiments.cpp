// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <utility>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "crackseg/data.hpp"
#include "crackseg/logging.hpp"
#include "crackseg/segment.hpp"
#include "crackseg/train.hpp"
#include "crackseg/version.hpp"

namespace crackseg {

namespace {

std::string p_name(double p) { return PoolingSpec{p}.p_str(); }

std::string hex64(uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

std::string format_metric(double value) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << value;
  return os.str();
}

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population
  int runs = 0;
};

Aggregate aggregate_of(const std::vector<double>& values) {
  Aggregate agg;
  agg.runs = static_cast<int>(values.size());
  if (values.empty()) return agg;
  for (const double v : values) agg.mean += v;
  agg.mean /= static_cast<double>(values.size());
  for (const double v : values) agg.std += (v - agg.mean) * (v - agg.mean);
  agg.std = std::sqrt(agg.std / static_cast<double>(values.size()));
  return agg;
}

void write_text_report(const std::filesystem::path& path,
                       const ExperimentConfig& config, const Dataset& dataset,
                       const DatasetSplit& split, const SweepReport& report) {
  // One column per exponent, Table-1 style: metric rows, L_p columns.
  const std::array<const char*, 4> metric_names{"precision", "recall", "f1",
                                                "accuracy"};
  auto metric_value = [](const SweepCell& cell, size_t m) {
    switch (m) {
      case 0: return cell.test_metrics.precision_crack;
      case 1: return cell.test_metrics.recall_crack;
      case 2: return cell.test_metrics.f1_crack;
      default: return cell.test_metrics.accuracy;
    }
  };

  std::vector<std::string> headers;
  std::vector<std::array<std::string, 4>> columns;
  std::vector<std::string> failures;
  for (const double p : config.sweep.p_values) {
    headers.push_back("L_" + p_name(p));
    std::array<std::string, 4> cells;
    bool any_failed = false;
    for (size_t m = 0; m < metric_names.size(); ++m) {
      std::vector<double> values;
      for (const SweepCell& cell : report.cells) {
        if (cell.p == p && cell.ok) values.push_back(metric_value(cell, m));
        if (cell.p == p && !cell.ok && m == 0) {
          any_failed = true;
          failures.push_back("L_" + p_name(p) + " run " +
                             std::to_string(cell.repeat) + ": " + cell.error);
        }
      }
      const Aggregate agg = aggregate_of(values);
      if (agg.runs == 0) {
        cells[m] = "--";
      } else if (agg.runs > 1) {
        cells[m] = format_metric(agg.mean) + "±" + format_metric(agg.std);
      } else {
        cells[m] = format_metric(agg.mean);
      }
    }
    if (any_failed) {
      for (auto& cell : cells) cell += "*";
    }
    columns.push_back(cells);
  }

  std::vector<size_t> widths(headers.size());
  for (size_t c = 0; c < headers.size(); ++c) {
    widths[c] = headers[c].size();
    for (const auto& cell : columns[c]) widths[c] = std::max(widths[c], cell.size());
  }

  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("sweep: cannot write '" + path.string() + "'");
  }
  out << "L_p sweep over '" << config.data.root << "'\n";
  out << "samples: " << dataset.samples.size() << " ("
      << dataset.count(CrackLabel::kCrack) << " crack / "
      << dataset.count(CrackLabel::kNonCrack) << " non-crack); labels: "
      << to_string(config.data.policy);
  if (std::any_of(dataset.samples.begin(), dataset.samples.end(),
                  [](const ImageSample& s) { return s.label_from_proxy; })) {
    out << " (derived from defect probability, NOT manual crack annotations)";
  }
  out << "\n";
  out << "split: train " << split.train.size() << " / val " << split.val.size()
      << " / test " << split.test.size() << " (seed " << split.seed
      << ", checksum " << hex64(report.split_digest) << ")\n";
  out << "repeats per p: " << config.sweep.repeats << "\n\n";

  const size_t name_width = 10;
  out << std::left << std::setw(static_cast<int>(name_width)) << "metric";
  for (size_t c = 0; c < headers.size(); ++c) {
    out << "  " << std::setw(static_cast<int>(widths[c])) << headers[c];
  }
  out << "\n";
  for (size_t m = 0; m < metric_names.size(); ++m) {
    out << std::setw(static_cast<int>(name_width)) << metric_names[m];
    for (size_t c = 0; c < headers.size(); ++c) {
      out << "  " << std::setw(static_cast<int>(widths[c])) << columns[c][m];
    }
    out << "\n";
  }
  out << "\nprecision, recall and f1 are measured on class 'crack'; accuracy "
         "over all test samples.\n";
  if (!failures.empty()) {
    out << "\n* incomplete column; failed runs:\n";
    for (const std::string& line : failures) out << "  " << line << "\n";
  }
}

void write_json_report(const std::filesystem::path& path,
                       const ExperimentConfig& config, const Dataset& dataset,
                       const DatasetSplit& split, const SweepReport& report) {
  nlohmann::ordered_json j;
  j["dataset"] = {
      {"root", config.data.root},
      {"samples", dataset.samples.size()},
      {"crack", dataset.count(CrackLabel::kCrack)},
      {"non_crack", dataset.count(CrackLabel::kNonCrack)},
      {"index_checksum", hex64(dataset.index_checksum)},
      {"labels_checksum", hex64(dataset.labels_checksum)},
      {"policy", to_string(config.data.policy)},
      {"proxy_labels",
       std::any_of(dataset.samples.begin(), dataset.samples.end(),
                   [](const ImageSample& s) { return s.label_from_proxy; })},
  };
  j["split"] = {
      {"seed", split.seed},
      {"train", split.train.size()},
      {"val", split.val.size()},
      {"test", split.test.size()},
      {"checksum", hex64(report.split_digest)},
  };
  j["provenance"] = {
      {"version", kVersion},
      {"git_revision", kGitRevision},
      {"model", nlohmann::json(config.model)},
      {"train", nlohmann::json(config.train)},
      {"bn_statistics", "fine-tuned"},
  };
  nlohmann::ordered_json p_values = nlohmann::json::array();
  for (const double p : config.sweep.p_values) p_values.push_back(p_name(p));
  j["p_values"] = p_values;
  j["repeats"] = config.sweep.repeats;
  j["complete"] = report.complete;

  nlohmann::ordered_json runs = nlohmann::json::array();
  for (const SweepCell& cell : report.cells) {
    nlohmann::ordered_json run{
        {"p", p_name(cell.p)},       {"repeat", cell.repeat},
        {"seed", cell.seed},         {"ok", cell.ok},
        {"split_checksum", hex64(report.split_digest)},
    };
    if (cell.ok) {
      run["metrics"] = nlohmann::json(cell.test_metrics);
      run["best_val_loss"] = cell.best_val_loss;
      run["best_epoch"] = cell.best_epoch;
      run["epochs_run"] = cell.epochs_run;
      run["checkpoint"] = cell.checkpoint;
    } else {
      run["error"] = cell.error;
    }
    runs.push_back(run);
  }
  j["runs"] = runs;

  nlohmann::ordered_json aggregate;
  for (const double p : config.sweep.p_values) {
    std::vector<double> precision, recall, f1, accuracy;
    for (const SweepCell& cell : report.cells) {
      if (cell.p != p || !cell.ok) continue;
      precision.push_back(cell.test_metrics.precision_crack);
      recall.push_back(cell.test_metrics.recall_crack);
      f1.push_back(cell.test_metrics.f1_crack);
      accuracy.push_back(cell.test_metrics.accuracy);
    }
    auto entry = [](const std::vector<double>& values) {
      const Aggregate agg = aggregate_of(values);
      return nlohmann::ordered_json{
          {"mean", agg.mean}, {"std", agg.std}, {"runs", agg.runs}};
    };
    aggregate[p_name(p)] = {
        {"precision_crack", entry(precision)},
        {"recall_crack", entry(recall)},
        {"f1_crack", entry(f1)},
        {"accuracy", entry(accuracy)},
    };
  }
  j["aggregate"] = aggregate;

  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("sweep: cannot write '" + path.string() + "'");
  }
  out << j.dump(2) << '\n';
}

Dataset load_sweep_dataset(const ExperimentConfig& config) {
  if (config.data.root.empty()) {
    throw std::runtime_error("sweep: data.root is required");
  }
  return load_dataset(config.data.root,
                      config.data.labels_file.empty()
                          ? std::filesystem::path{}
                          : std::filesystem::path(config.data.labels_file),
                      {config.data.policy, true});
}

DatasetSplit make_sweep_split(const ExperimentConfig& config,
                              const Dataset& dataset) {
  if (config.data.split_by_module) {
    return stratified_group_split(dataset.samples, config.data.split,
                                  config.data.split_seed,
                                  load_group_map(config.data.module_map));
  }
  return stratified_split(dataset.samples, config.data.split,
                          config.data.split_seed);
}

std::filesystem::path cell_run_dir(const std::filesystem::path& out_dir,
                                   double p, int repeat) {
  return out_dir / ("p" + p_name(p)) / ("run" + std::to_string(repeat));
}

/// Per-cell record written next to the run artifacts; the report
/// collector reads these back, so a parallel sweep needs no shared state
/// beyond the filesystem.
void write_cell_record(const SweepCell& cell, uint64_t split_digest,
                       const std::filesystem::path& run_dir) {
  nlohmann::ordered_json j{
      {"p", p_name(cell.p)},
      {"repeat", cell.repeat},
      {"seed", cell.seed},
      {"ok", cell.ok},
      {"split_checksum", hex64(split_digest)},
  };
  if (cell.ok) {
    j["metrics"] = nlohmann::json(cell.test_metrics);
    j["best_val_loss"] = cell.best_val_loss;
    j["best_epoch"] = cell.best_epoch;
    j["epochs_run"] = cell.epochs_run;
    j["checkpoint"] = cell.checkpoint;
  } else {
    j["error"] = cell.error;
  }
  const auto path = run_dir / "cell.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("sweep: cannot write '" + path.string() + "'");
  }
  out << j.dump(2) << '\n';
}

SweepCell read_cell_record(const ExperimentConfig& config,
                           const std::filesystem::path& out_dir, double p,
                           int repeat, uint64_t split_digest) {
  SweepCell cell;
  cell.p = p;
  cell.repeat = repeat;
  cell.seed = config.train.seed + static_cast<uint64_t>(repeat);
  cell.ok = false;

  const auto path = cell_run_dir(out_dir, p, repeat) / "cell.json";
  std::ifstream in(path);
  if (!in) {
    cell.error = "no result recorded at '" + path.string() +
                 "' (run missing or crashed)";
    return cell;
  }
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("p").get<std::string>() != p_name(p) ||
        j.at("repeat").get<int>() != repeat) {
      throw std::runtime_error("record belongs to a different cell");
    }
    if (j.at("split_checksum").get<std::string>() != hex64(split_digest)) {
      throw std::runtime_error(
          "stale result: split checksum differs from the current config");
    }
    cell.seed = j.at("seed").get<uint64_t>();
    cell.ok = j.at("ok").get<bool>();
    if (cell.ok) {
      const auto& m = j.at("metrics");
      const auto& confusion = m.at("confusion");
      for (size_t a = 0; a < 2; ++a) {
        for (size_t b = 0; b < 2; ++b) {
          cell.test_metrics.confusion.counts[a][b] =
              confusion.at(a).at(b).get<int64_t>();
        }
      }
      cell.test_metrics.precision_crack = m.at("precision_crack").get<double>();
      cell.test_metrics.recall_crack = m.at("recall_crack").get<double>();
      cell.test_metrics.f1_crack = m.at("f1_crack").get<double>();
      cell.test_metrics.accuracy = m.at("accuracy").get<double>();
      cell.best_val_loss = j.at("best_val_loss").get<double>();
      cell.best_epoch = j.at("best_epoch").get<int>();
      cell.epochs_run = j.at("epochs_run").get<int>();
      cell.checkpoint = j.at("checkpoint").get<std::string>();
    } else {
      cell.error = j.at("error").get<std::string>();
    }
  } catch (const std::exception& e) {
    cell.ok = false;
    cell.error = std::string("unreadable cell record '") + path.string() +
                 "': " + e.what();
  }
  return cell;
}

SweepCell execute_cell(const ExperimentConfig& config,
                       const std::filesystem::path& out_dir, double p,
                       int repeat, const DatasetSplit& split,
                       uint64_t split_digest) {
  SweepCell cell;
  cell.p = p;
  cell.repeat = repeat;
  cell.seed = config.train.seed + static_cast<uint64_t>(repeat);

  const std::filesystem::path run_dir = cell_run_dir(out_dir, p, repeat);
  std::filesystem::create_directories(run_dir);
  log::info("sweep: p = " + p_name(p) + ", repeat " + std::to_string(repeat) +
            ", seed " + std::to_string(cell.seed));
  try {
    ModelConfig model_config = config.model;
    model_config.pooling.p = p;
    model_config.seed = cell.seed;
    TrainConfig train_config = config.train;
    train_config.seed = cell.seed;

    Model model = build_model(model_config);
    const std::filesystem::path history = run_dir / "history.jsonl";
    const TrainResult trained =
        train(model, config.data.root, split, train_config, &history);
    cell.test_metrics =
        evaluate(model, config.data.root, split.test, train_config.batch_size);

    const nlohmann::json extra{
        {"label_policy", to_string(config.data.policy)},
        {"bn_statistics", "fine-tuned"},
        {"split_checksum", hex64(split_digest)},
    };
    model.save_checkpoint(run_dir / "checkpoint.ckpt", &extra);

    cell.ok = true;
    cell.best_val_loss = trained.best_val_loss;
    cell.best_epoch = trained.best_epoch;
    cell.epochs_run = static_cast<int>(trained.history.size());
    cell.checkpoint =
        std::filesystem::relative(run_dir / "checkpoint.ckpt", out_dir)
            .string();
    log::info("sweep: p = " + p_name(p) + " done, test f1 " +
              format_metric(cell.test_metrics.f1_crack) + ", accuracy " +
              format_metric(cell.test_metrics.accuracy));
  } catch (const std::exception& e) {
    cell.ok = false;
    cell.error = e.what();
    log::error("sweep: p = " + p_name(p) + ", repeat " +
               std::to_string(repeat) + " failed: " + cell.error);
  }
  write_cell_record(cell, split_digest, run_dir);
  return cell;
}

SweepReport finalize_report(const ExperimentConfig& config,
                            const Dataset& dataset, const DatasetSplit& split,
                            std::vector<SweepCell> cells,
                            const std::filesystem::path& out_dir) {
  SweepReport report;
  report.split_digest = split_checksum(split);
  report.cells = std::move(cells);
  report.complete = std::all_of(report.cells.begin(), report.cells.end(),
                                [](const SweepCell& c) { return c.ok; });
  write_json_report(out_dir / "report.json", config, dataset, split, report);
  write_text_report(out_dir / "report.txt", config, dataset, split, report);
  log::info(std::string("sweep: report written to '") +
            (out_dir / "report.txt").string() + "'" +
            (report.complete ? "" : " (incomplete)"));
  return report;
}

void write_gray_png(const std::vector<uint8_t>& pixels, int height, int width,
                    const std::filesystem::path& path) {
  const cv::Mat mat(height, width, CV_8UC1, const_cast<uint8_t*>(pixels.data()));
  if (!cv::imwrite(path.string(), mat)) {
    throw std::runtime_error("panel: failed to write '" + path.string() + "'");
  }
}

/// Min-max to 8-bit at the map's native resolution, then nearest-neighbor
/// to the target extent. All-equal maps render mid-gray.
std::vector<uint8_t> render_heatmap(const Tensor& heatmap, int target) {
  const int h = heatmap.dim(0);
  const int w = heatmap.dim(1);
  const float* data = heatmap.data();
  float lo = data[0], hi = data[0];
  for (int64_t i = 1; i < heatmap.numel(); ++i) {
    lo = std::min(lo, data[i]);
    hi = std::max(hi, data[i]);
  }
  std::vector<uint8_t> native(static_cast<size_t>(h) * w, 128);
  if (hi > lo) {
    for (int64_t i = 0; i < heatmap.numel(); ++i) {
      native[static_cast<size_t>(i)] = static_cast<uint8_t>(
          std::lround(255.0f * (data[i] - lo) / (hi - lo)));
    }
  }
  std::vector<uint8_t> out(static_cast<size_t>(target) * target);
  for (int y = 0; y < target; ++y) {
    const int sy = static_cast<int>(static_cast<int64_t>(y) * h / target);
    for (int x = 0; x < target; ++x) {
      const int sx = static_cast<int>(static_cast<int64_t>(x) * w / target);
      out[static_cast<size_t>(y) * target + x] =
          native[static_cast<size_t>(sy) * w + sx];
    }
  }
  return out;
}

}  // namespace

std::pair<Dataset, DatasetSplit> load_and_split(
    const ExperimentConfig& config) {
  Dataset dataset = load_sweep_dataset(config);
  DatasetSplit split = make_sweep_split(config, dataset);
  return {std::move(dataset), std::move(split)};
}

SweepReport run_sweep(const ExperimentConfig& config,
                      const std::filesystem::path& out_dir) {
  config.validate();
  std::filesystem::create_directories(out_dir);

  const Dataset dataset = load_sweep_dataset(config);
  const DatasetSplit split = make_sweep_split(config, dataset);
  const uint64_t digest = split_checksum(split);
  log::info("sweep: split train " + std::to_string(split.train.size()) +
            " / val " + std::to_string(split.val.size()) + " / test " +
            std::to_string(split.test.size()) + ", checksum " + hex64(digest));

  {
    ExperimentConfig resolved = config;
    resolved.output_dir = out_dir.string();
    save_experiment_config(resolved, out_dir / "config.json");
  }

  std::vector<SweepCell> cells;
  for (const double p : config.sweep.p_values) {
    for (int repeat = 0; repeat < config.sweep.repeats; ++repeat) {
      cells.push_back(execute_cell(config, out_dir, p, repeat, split, digest));
    }
  }
  return finalize_report(config, dataset, split, std::move(cells), out_dir);
}

SweepCell run_sweep_cell(const ExperimentConfig& config,
                         const std::filesystem::path& out_dir, double p,
                         int repeat) {
  config.validate();
  PoolingSpec{p}.validate();
  if (repeat < 0 || repeat >= config.sweep.repeats) {
    throw std::invalid_argument("sweep: repeat " + std::to_string(repeat) +
                                " out of range for " +
                                std::to_string(config.sweep.repeats) +
                                " configured repeats");
  }
  const Dataset dataset = load_sweep_dataset(config);
  const DatasetSplit split = make_sweep_split(config, dataset);
  return execute_cell(config, out_dir, p, repeat, split,
                      split_checksum(split));
}

SweepReport collect_sweep_report(const ExperimentConfig& config,
                                 const std::filesystem::path& out_dir) {
  config.validate();
  const Dataset dataset = load_sweep_dataset(config);
  const DatasetSplit split = make_sweep_split(config, dataset);
  const uint64_t digest = split_checksum(split);

  std::vector<SweepCell> cells;
  for (const double p : config.sweep.p_values) {
    for (int repeat = 0; repeat < config.sweep.repeats; ++repeat) {
      cells.push_back(read_cell_record(config, out_dir, p, repeat, digest));
    }
  }
  return finalize_report(config, dataset, split, std::move(cells), out_dir);
}

PanelResult emit_panel(
    const std::map<double, std::filesystem::path>& checkpoints,
    const std::vector<std::filesystem::path>& images,
    const std::filesystem::path& out_dir, bool overlay,
    const std::string& polarity) {
  if (images.empty()) {
    throw std::invalid_argument("panel: no input images");
  }
  std::filesystem::create_directories(out_dir);

  PanelResult result;
  std::map<double, std::filesystem::path> available;
  for (const auto& [p, path] : checkpoints) {
    if (std::filesystem::exists(path)) {
      available[p] = path;
    } else {
      result.skipped_p.push_back(p);
      log::warn("panel: no checkpoint for p = " + p_name(p) + " at '" +
                path.string() + "', skipped");
    }
  }
  if (available.empty()) {
    throw std::runtime_error("panel: none of the requested checkpoints exist");
  }

  // Stems can collide across directories; disambiguate deterministically.
  std::map<std::string, int> stem_uses;
  std::vector<std::string> names;
  for (const auto& image : images) {
    std::string stem = image.stem().string();
    const int use = ++stem_uses[stem];
    if (use > 1) stem += "_" + std::to_string(use);
    names.push_back(stem);
  }

  // One model in memory at a time; originals are written on the first pass.
  bool originals_written = false;
  for (const auto& [p, checkpoint_path] : available) {
    Model model = Model::load_checkpoint(checkpoint_path);
    const int input_size = model.config().input_size;

    for (size_t i = 0; i < images.size(); ++i) {
      if (!originals_written) {
        const cv::Mat original =
            cv::imread(images[i].string(), cv::IMREAD_GRAYSCALE);
        if (original.empty()) {
          throw std::runtime_error("panel: failed to read image '" +
                                   images[i].string() + "'");
        }
        const auto path = out_dir / (names[i] + "_original.png");
        if (!cv::imwrite(path.string(), original)) {
          throw std::runtime_error("panel: failed to write '" + path.string() +
                                   "'");
        }
        result.written.push_back(path);
      }

      const Tensor image = preprocess_image(images[i], input_size);
      const HeatmapExtraction extraction = extract_heatmap(model, image);

      const auto heatmap_path =
          out_dir / (names[i] + "_L" + p_name(p) + ".png");
      write_gray_png(render_heatmap(extraction.heatmap, input_size), input_size,
                     input_size, heatmap_path);
      result.written.push_back(heatmap_path);

      if (overlay) {
        std::optional<PolarityMode> mode = polarity == "auto"
                                               ? default_polarity(p)
                                               : parse_polarity(polarity);
        if (!mode) {
          throw std::runtime_error(
              "panel: no default polarity for p = " + p_name(p) +
              "; pass an explicit polarity");
        }
        SegmentationMask mask = apply_gate(
            extraction.classification, threshold_mask(extraction.heatmap, *mode));
        mask = upsample_mask(mask, input_size, input_size);
        const auto mask_path =
            out_dir / (names[i] + "_L" + p_name(p) + "_mask.png");
        write_mask_png(mask, mask_path);
        result.written.push_back(mask_path);
      }
    }
    originals_written = true;
  }
  log::info("panel: wrote " + std::to_string(result.written.size()) +
            " files to '" + out_dir.string() + "'");
  return result;
}

}  // namespace crackseg
