// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance gate. Each criterion runs standalone, prints one
// verdict line and never aborts the remaining criteria; the process exit
// code is the number of failures. The quantitative public-dataset check
// is contingent on the dataset being present and reports SKIP otherwise.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crackseg/config.hpp"
#include "crackseg/data.hpp"
#include "crackseg/experiments.hpp"
#include "crackseg/logging.hpp"
#include "crackseg/metrics.hpp"
#include "crackseg/model.hpp"
#include "crackseg/pooling.hpp"
#include "crackseg/segment.hpp"
#include "crackseg/synthetic.hpp"
#include "crackseg/train.hpp"
#include "support.hpp"

namespace {

using namespace crackseg;
using testsupport::max_gradient_error;
using testsupport::random_map;
using testsupport::TempDir;

constexpr double kInf = PoolingSpec::kInfinity;

struct Outcome {
  bool pass = false;
  bool skipped = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

std::string fmt(double value, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << value;
  return os.str();
}

// Criterion: against brute-force references on 1000 random maps (sizes 1
// to 2000, values up to 1e3 in magnitude), pooling at p = 1 matches the
// mean of magnitudes within 1e-9 and p = inf matches the maximum
// magnitude exactly, in under 10 seconds.
Outcome pooling_limit_oracles() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const size_t n = 1 + rng() % 2000;
    const auto map = random_map(rng, n, -1e3, 1e3);

    double mean = 0.0;
    double peak = 0.0;
    for (const double v : map) {
      mean += std::abs(v);
      peak = std::max(peak, std::abs(v));
    }
    mean /= static_cast<double>(n);

    worst = std::max(worst,
                     std::abs(lp_pool_forward(map, PoolingSpec::lp(1)) - mean));
    if (lp_pool_forward(map, PoolingSpec::lp(kInf)) != peak) {
      return {false, false, "p = inf diverged from the exact maximum"};
    }
  }
  const double elapsed = seconds_since(start);
  Outcome out;
  out.pass = worst <= 1e-9 && elapsed < 10.0;
  out.detail = "L1 max err " + fmt(worst) + ", Linf exact on 1000 maps";
  if (elapsed >= 10.0) out.detail += " (over the 10 s budget)";
  return out;
}

// Criterion: the pooled value is non-decreasing in p (tolerance +1e-9)
// across 1000 random maps and all ordered pairs from
// {1, 1.5, 2, 3, 4, 5, 9, 64}, in under 30 seconds.
Outcome power_mean_monotonicity() {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<double> exponents{1, 1.5, 2, 3, 4, 5, 9, 64};
  std::mt19937_64 rng(2);
  double worst_violation = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const size_t n = 1 + rng() % 1000;
    const auto map = random_map(rng, n, -1e3, 1e3);
    std::vector<double> pooled;
    pooled.reserve(exponents.size());
    for (const double p : exponents) {
      pooled.push_back(lp_pool_forward(map, PoolingSpec::lp(p)));
    }
    for (size_t a = 0; a < pooled.size(); ++a) {
      for (size_t b = a + 1; b < pooled.size(); ++b) {
        worst_violation = std::max(worst_violation, pooled[a] - pooled[b]);
      }
    }
  }
  const double elapsed = seconds_since(start);
  Outcome out;
  out.pass = worst_violation <= 1e-9 && elapsed < 30.0;
  out.detail = "worst decrease " + fmt(worst_violation) +
               " over 28 exponent pairs x 1000 maps";
  if (elapsed >= 30.0) out.detail += " (over the 30 s budget)";
  return out;
}

// Criterion: the analytic gradient matches central differences (step
// 1e-5) with max relative error below 1e-4 on 200 random cases covering
// p in {1, 2, 3, 4, 5, 9}, entries in [-10, 10], in under 30 seconds.
// Errors are normalized by the largest finite-difference component of
// each case; for p = 1 entries near the magnitude kink are resampled.
Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<double> exponents{1, 2, 3, 4, 5, 9};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-10.0, 10.0);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double p = exponents[i % exponents.size()];
    const size_t n = 1 + rng() % 64;
    auto map = random_map(rng, n, -10.0, 10.0);
    if (p == 1.0) {
      for (double& v : map) {
        while (std::abs(v) < 1e-3) v = dist(rng);
      }
    }
    worst = std::max(worst, max_gradient_error(map, PoolingSpec::lp(p), 1e-5));
  }
  const double elapsed = seconds_since(start);
  Outcome out;
  out.pass = worst < 1e-4 && elapsed < 30.0;
  out.detail = "max relative error " + fmt(worst) + " over 200 cases";
  if (elapsed >= 30.0) out.detail += " (over the 30 s budget)";
  return out;
}

// Criterion: a 300 x 300 input produces activation maps of exactly
// [2, 38, 38] per image.
Outcome shape_contract() {
  ModelConfig cfg;
  cfg.input_size = 300;
  cfg.pooling = PoolingSpec::lp(kInf);
  cfg.seed = 0;
  Model model = build_model(cfg);
  model.train_mode(false);

  Tensor batch({1, 3, 300, 300});
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
  for (int64_t i = 0; i < batch.numel(); ++i) batch.data()[i] = dist(rng);

  const ForwardResult result = model.forward(batch);
  const ActivationMaps maps = image_maps(result, 0);
  Outcome out;
  out.pass = cfg.map_size() == 38 && maps.grid.dim(0) == 2 &&
             maps.height() == 38 && maps.width() == 38 &&
             result.scores.size() == 1;
  out.detail = "maps [" + std::to_string(maps.grid.dim(0)) + ", " +
               std::to_string(maps.height()) + ", " +
               std::to_string(maps.width()) + "] from a 300 x 300 input";
  return out;
}

// Criterion: the dynamic threshold mask is invariant under positive
// scaling (1000 maps x 5 scales, exact), and the classification gate is
// sound on 200 random model outputs.
Outcome mask_invariance_and_gate() {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const size_t n = 1 + rng() % 256;
    const auto map = random_map(rng, n, -5.0, 5.0);
    const SegmentationMask base =
        threshold_mask(map, 1, static_cast<int>(n), PolarityMode::kDirect);
    for (const double c : {1e-4, 0.5, 1.0, 7.0, 1e6}) {
      std::vector<double> scaled(map);
      for (double& v : scaled) v *= c;
      const SegmentationMask got =
          threshold_mask(scaled, 1, static_cast<int>(n), PolarityMode::kDirect);
      if (got.grid != base.grid) {
        return {false, false,
                "mask changed under scale " + fmt(c) + " at case " +
                    std::to_string(i)};
      }
    }
  }

  std::uniform_real_distribution<double> score(-3.0, 3.0);
  int gated_count = 0;
  for (int i = 0; i < 200; ++i) {
    const auto map = random_map(rng, 64, -5.0, 5.0);
    const Classification cls = classify({score(rng), score(rng)});
    const SegmentationMask raw =
        threshold_mask(map, 8, 8, PolarityMode::kDirect);
    const SegmentationMask masked = apply_gate(cls, raw);
    if (cls.label == CrackLabel::kNonCrack) {
      ++gated_count;
      if (masked.foreground() != 0 || !masked.gated) {
        return {false, false, "gate failed to zero a non-crack mask"};
      }
    } else if (masked.grid != raw.grid || masked.gated) {
      return {false, false, "gate altered a crack-positive mask"};
    }
  }
  Outcome out;
  out.pass = true;
  out.detail = "masks scale-invariant on 1000 maps, gate sound on 200 outputs (" +
               std::to_string(gated_count) + " gated)";
  return out;
}

struct OverfitArtifacts {
  SyntheticSet set;
  DatasetSplit split;
  std::vector<ImageSample> held_out_crack;
};

/// 40-image synthetic line set with a hand-carved split: 26 train, 4
/// val, 10 test of which 5 are crack images with known line masks.
OverfitArtifacts overfit_fixture(const std::filesystem::path& root) {
  SyntheticSpec spec;
  spec.count = 40;
  spec.image_size = 64;
  spec.seed = 1234;
  OverfitArtifacts art;
  art.set = write_synthetic_set(root, spec);

  std::vector<ImageSample> crack;
  std::vector<ImageSample> non_crack;
  for (const ImageSample& s : art.set.samples) {
    (s.crack_label == CrackLabel::kCrack ? crack : non_crack).push_back(s);
  }
  auto take = [](std::vector<ImageSample>& dst, const std::vector<ImageSample>& src,
                 size_t from, size_t to) {
    dst.insert(dst.end(), src.begin() + from, src.begin() + to);
  };
  take(art.split.train, crack, 0, 13);
  take(art.split.train, non_crack, 0, 13);
  take(art.split.val, crack, 13, 15);
  take(art.split.val, non_crack, 13, 15);
  take(art.split.test, crack, 15, 20);
  take(art.split.test, non_crack, 15, 20);
  art.held_out_crack.assign(crack.begin() + 15, crack.end());
  return art;
}

/// Fraction of drawn line pixels covered by the predicted masks, summed
/// over the held-out crack images. Pooling scores magnitudes, so whether
/// crack evidence lands positive or negative is a symmetry broken at
/// initialization; the realized polarity is measured from the sign of
/// each map's dominant activation instead of assumed, and reported.
double line_coverage(Model& model, const OverfitArtifacts& art,
                     PolarityMode* measured, std::string* per_image) {
  std::vector<HeatmapExtraction> extractions;
  size_t negative_votes = 0;
  for (const ImageSample& sample : art.held_out_crack) {
    const Tensor image =
        preprocess(art.set.root, sample, model.config().input_size);
    extractions.push_back(extract_heatmap(model, image));
    const Tensor& heatmap = extractions.back().heatmap;
    float peak = 0.0f;
    bool peak_negative = false;
    for (int64_t i = 0; i < heatmap.numel(); ++i) {
      const float v = heatmap.data()[i];
      if (std::abs(v) >= peak) {
        peak = std::abs(v);
        peak_negative = v < 0.0f;
      }
    }
    if (peak_negative) ++negative_votes;
  }
  const PolarityMode polarity = 2 * negative_votes > art.held_out_crack.size()
                                    ? PolarityMode::kInverted
                                    : PolarityMode::kDirect;
  if (measured != nullptr) *measured = polarity;

  int64_t covered = 0;
  int64_t line_total = 0;
  for (size_t s = 0; s < art.held_out_crack.size(); ++s) {
    const ImageSample& sample = art.held_out_crack[s];
    const HeatmapExtraction& extraction = extractions[s];
    SegmentationMask mask =
        apply_gate(extraction.classification,
                   threshold_mask(extraction.heatmap, polarity));
    mask = upsample_mask(mask, model.config().input_size,
                         model.config().input_size);

    const auto& line = art.set.line_masks.at(sample.path);
    int64_t hit = 0;
    int64_t total = 0;
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == 0) continue;
      ++total;
      if (mask.grid[i] != 0) ++hit;
    }
    covered += hit;
    line_total += total;
    if (per_image != nullptr) {
      if (!per_image->empty()) *per_image += " ";
      *per_image += fmt(total > 0 ? static_cast<double>(hit) / total : 0.0, 2);
    }
  }
  return line_total > 0 ? static_cast<double>(covered) / line_total : 0.0;
}

// Criterion: on a 40-image synthetic line set, training with p = inf
// reaches train accuracy >= 0.95 within 50 epochs in under 10 minutes,
// and the masks on 5 held-out crack images cover >= 50 percent of the
// drawn line pixels after upsampling.
Outcome synthetic_overfit() {
  const auto start = std::chrono::steady_clock::now();
  TempDir tmp("accept-overfit");
  const OverfitArtifacts art = overfit_fixture(tmp.path() / "data");

  ModelConfig model_config;
  model_config.input_size = 64;
  model_config.pooling = PoolingSpec::lp(kInf);
  model_config.seed = 7;
  Model model = build_model(model_config);

  TrainConfig train_config;
  train_config.epochs = 50;
  train_config.batch_size = 8;
  train_config.learning_rate = 1e-3;
  train_config.seed = 7;
  train_config.balance = false;
  train_config.augment = false;
  train_config.early_stop_patience = 0;
  train_config.stop_at_train_accuracy = 0.95;

  const TrainResult trained =
      train(model, art.set.root, art.split, train_config);
  const MetricsReport on_train =
      evaluate(model, art.set.root, art.split.train, train_config.batch_size);

  std::string per_image;
  PolarityMode polarity = PolarityMode::kDirect;
  const double coverage = line_coverage(model, art, &polarity, &per_image);
  const double elapsed = seconds_since(start);

  Outcome out;
  out.pass = on_train.accuracy >= 0.95 && coverage >= 0.5 && elapsed < 600.0;
  out.detail = "train accuracy " + fmt(on_train.accuracy, 4) + " after " +
               std::to_string(trained.history.size()) +
               " epochs, line coverage " + fmt(coverage, 3) + " with measured " +
               to_string(polarity) + " polarity (per image: " + per_image + ")";
  if (elapsed >= 600.0) out.detail += " (over the 10 min budget)";
  return out;
}

// Criterion: precision, recall, F1 and accuracy identities hold exactly
// on 1000 randomized confusion matrices.
Outcome metric_identities() {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int64_t> count(0, 1000);
  int checked = 0;
  while (checked < 1000) {
    const int64_t tp = count(rng), fn = count(rng);
    const int64_t fp = count(rng), tn = count(rng);
    if (tp + fn + fp + tn == 0) continue;
    ++checked;

    ConfusionMatrix m;
    m.add(CrackLabel::kCrack, CrackLabel::kCrack, tp);
    m.add(CrackLabel::kCrack, CrackLabel::kNonCrack, fn);
    m.add(CrackLabel::kNonCrack, CrackLabel::kCrack, fp);
    m.add(CrackLabel::kNonCrack, CrackLabel::kNonCrack, tn);
    const MetricsReport r = MetricsReport::from_confusion(m);

    const double precision =
        tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp)
                    : 0.0;
    const double recall =
        tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn)
                    : 0.0;
    const double f1 = precision + recall > 0.0
                          ? 2.0 * precision * recall / (precision + recall)
                          : 0.0;
    const double accuracy = static_cast<double>(tp + tn) /
                            static_cast<double>(tp + fn + fp + tn);
    if (r.precision_crack != precision || r.recall_crack != recall ||
        r.f1_crack != f1 || r.accuracy != accuracy) {
      return {false, false,
              "identity broke at case " + std::to_string(checked)};
    }
  }
  return {true, false, "identities exact on 1000 randomized confusions"};
}

// Criterion (contingent): with the public dataset present, proxy labels
// and pretrained weights, sweeping p in {1, 3} reaches accuracy >= 0.85
// and F1 >= 0.60. Skipped when the dataset is absent.
Outcome public_dataset_quantitative() {
  std::filesystem::path root;
  if (const char* env = std::getenv("CRACKSEG_ELPV_ROOT")) {
    root = env;
  } else if (std::filesystem::exists("data/elpv/labels.csv")) {
    root = "data/elpv";
  } else {
    root = "/root/proj/data/elpv";
  }
  if (!std::filesystem::exists(root / "labels.csv")) {
    Outcome out;
    out.skipped = true;
    out.detail = "dataset not found at '" + root.string() +
                 "' (set CRACKSEG_ELPV_ROOT to run)";
    return out;
  }

  TempDir tmp("accept-elpv");
  ExperimentConfig cfg;
  cfg.data.root = root.string();
  cfg.data.policy = LabelPolicy::kProxy;
  if (const char* weights = std::getenv("CRACKSEG_PRETRAINED")) {
    cfg.model.pretrained_weights_path = weights;
  }
  cfg.sweep.p_values = {1.0, 3.0};
  cfg.sweep.repeats = 1;

  const SweepReport report = run_sweep(cfg, tmp.path() / "sweep");
  Outcome out;
  out.pass = report.complete;
  std::string detail;
  for (const SweepCell& cell : report.cells) {
    if (!cell.ok) {
      out.pass = false;
      continue;
    }
    out.pass = out.pass && cell.test_metrics.accuracy >= 0.85 &&
               cell.test_metrics.f1_crack >= 0.60;
    if (!detail.empty()) detail += "; ";
    detail += "p=" + PoolingSpec{cell.p}.p_str() + " acc " +
              fmt(cell.test_metrics.accuracy, 4) + " f1 " +
              fmt(cell.test_metrics.f1_crack, 4);
  }
  out.detail = detail.empty() ? "no cells completed" : detail;
  if (cfg.model.pretrained_weights_path.empty()) {
    out.detail += " (random init; set CRACKSEG_PRETRAINED for the full recipe)";
  }
  return out;
}

// Criterion: two sweeps with identical config and seed produce
// structurally identical reports with metrics agreeing within 1e-5.
Outcome sweep_reproducibility() {
  TempDir tmp("accept-repro");
  SyntheticSpec spec;
  spec.count = 16;
  spec.image_size = 32;
  spec.seed = 77;
  const SyntheticSet set = write_synthetic_set(tmp.path() / "data", spec);

  ExperimentConfig cfg;
  cfg.data.root = set.root.string();
  cfg.data.labels_file = set.labels_file.string();
  cfg.model.input_size = 32;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 4;
  cfg.train.learning_rate = 1e-4;
  cfg.train.seed = 9;
  cfg.train.early_stop_patience = 0;
  cfg.sweep.p_values = {1.0, kInf};
  cfg.sweep.repeats = 1;

  const SweepReport first = run_sweep(cfg, tmp.path() / "a");
  const SweepReport second = run_sweep(cfg, tmp.path() / "b");
  if (!first.complete || !second.complete) {
    return {false, false, "a sweep failed to complete"};
  }

  const auto read = [](const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
  };
  const std::string json_a = read(tmp.path() / "a" / "report.json");
  const std::string json_b = read(tmp.path() / "b" / "report.json");

  double worst = 0.0;
  for (size_t i = 0; i < first.cells.size(); ++i) {
    const MetricsReport& ma = first.cells[i].test_metrics;
    const MetricsReport& mb = second.cells[i].test_metrics;
    worst = std::max(worst, std::abs(ma.accuracy - mb.accuracy));
    worst = std::max(worst, std::abs(ma.precision_crack - mb.precision_crack));
    worst = std::max(worst, std::abs(ma.recall_crack - mb.recall_crack));
    worst = std::max(worst, std::abs(ma.f1_crack - mb.f1_crack));
  }

  Outcome out;
  out.pass = json_a == json_b && worst <= 1e-5;
  out.detail = std::string(json_a == json_b ? "reports byte-identical"
                                            : "reports differ") +
               ", max metric delta " + fmt(worst);
  return out;
}

// Worked example from the experiment driver: a sweep over p = {1} on the
// synthetic overfit set reports a single column with accuracy >= 0.95.
Outcome sweep_overfit_example() {
  TempDir tmp("accept-sweep-overfit");
  SyntheticSpec spec;
  spec.count = 40;
  spec.image_size = 64;
  spec.seed = 1234;
  const SyntheticSet set = write_synthetic_set(tmp.path() / "data", spec);

  ExperimentConfig cfg;
  cfg.data.root = set.root.string();
  cfg.data.labels_file = set.labels_file.string();
  cfg.model.input_size = 64;
  cfg.train.epochs = 50;
  cfg.train.batch_size = 8;
  cfg.train.learning_rate = 1e-3;
  cfg.train.seed = 7;
  cfg.train.balance = false;
  cfg.train.augment = false;
  cfg.train.early_stop_patience = 0;
  cfg.train.stop_at_train_accuracy = 0.95;
  cfg.sweep.p_values = {1.0};
  cfg.sweep.repeats = 1;

  const SweepReport report = run_sweep(cfg, tmp.path() / "sweep");
  Outcome out;
  if (!report.complete || report.cells.size() != 1 || !report.cells[0].ok) {
    out.detail = "sweep did not complete";
    return out;
  }
  const double accuracy = report.cells[0].test_metrics.accuracy;
  out.pass = accuracy >= 0.95;
  out.detail = "p = 1 column test accuracy " + fmt(accuracy, 4) + " after " +
               std::to_string(report.cells[0].epochs_run) + " epochs";
  return out;
}

}  // namespace

int main() {
  // Only errors from the library; the verdict lines are the output.
  log::set_level(log::Level::kError);

  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const std::vector<Criterion> criteria{
      {"pooling-limit-oracles", pooling_limit_oracles},
      {"power-mean-monotonicity", power_mean_monotonicity},
      {"pooling-gradient-check", gradient_check},
      {"activation-map-shape", shape_contract},
      {"mask-invariance-and-gate", mask_invariance_and_gate},
      {"synthetic-overfit", synthetic_overfit},
      {"metric-identities", metric_identities},
      {"elpv-quantitative", public_dataset_quantitative},
      {"sweep-reproducibility", sweep_reproducibility},
      {"sweep-overfit-example", sweep_overfit_example},
  };

  int failures = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = criteria[i].run();
    } catch (const std::exception& e) {
      outcome.pass = false;
      outcome.detail = std::string("unexpected exception: ") + e.what();
    }
    const double elapsed = seconds_since(start);

    const char* verdict =
        outcome.skipped ? "SKIP" : (outcome.pass ? "PASS" : "FAIL");
    if (!outcome.skipped && !outcome.pass) ++failures;

    std::ostringstream line;
    line << '[' << verdict << "] " << std::left << std::setw(26)
         << criteria[i].name << std::right << std::setw(7) << std::fixed
         << std::setprecision(1) << elapsed << "s  " << outcome.detail;
    std::cout << line.str() << std::endl;
  }

  if (failures > 0) {
    std::cout << failures << " criterion(s) failed" << std::endl;
  }
  return failures;
}
