// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: dataset preparation, training, evaluation, the
// L_p sweep, mask export and figure panels. Exit codes: 0 success,
// 1 config or data error, 2 partial sweep failure.
#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>

#include <algorithm>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
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
#include "crackseg/version.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace crackseg;

namespace {

std::string hex64(uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

std::string p_name(double p) { return PoolingSpec{p}.p_str(); }

double parse_single_p(const std::string& text) {
  const std::vector<double> values = parse_p_list(text);
  if (values.size() != 1) {
    throw std::invalid_argument("expected one pooling exponent, got '" + text +
                                "'");
  }
  return values[0];
}

/// File stems repeat across directories; suffix later uses so output
/// names stay unique and deterministic.
std::vector<std::string> disambiguated_stems(
    const std::vector<std::string>& paths) {
  std::map<std::string, int> uses;
  std::vector<std::string> stems;
  stems.reserve(paths.size());
  for (const std::string& path : paths) {
    std::string stem = fs::path(path).stem().string();
    const int use = ++uses[stem];
    if (use > 1) stem += "_" + std::to_string(use);
    stems.push_back(std::move(stem));
  }
  return stems;
}

void print_metrics(const MetricsReport& metrics) {
  std::cout << std::fixed << std::setprecision(4)              //
            << "precision " << metrics.precision_crack         //
            << "  recall " << metrics.recall_crack             //
            << "  f1 " << metrics.f1_crack                     //
            << "  accuracy " << metrics.accuracy << "\n";
  const auto& c = metrics.confusion.counts;
  std::cout << "confusion [actual x predicted], class order {crack, "
               "non-crack}: [["
            << c[0][0] << ", " << c[0][1] << "], [" << c[1][0] << ", "
            << c[1][1] << "]]\n";
}

// ---------------------------------------------------------------------------
// Shared dataset flags

struct DataFlags {
  std::string root;
  std::string labels;
  std::string policy;
  std::string module_map;
  uint64_t split_seed = 0;
  bool split_by_module = false;

  CLI::Option* root_opt = nullptr;
  CLI::Option* labels_opt = nullptr;
  CLI::Option* policy_opt = nullptr;
  CLI::Option* split_seed_opt = nullptr;
  CLI::Option* by_module_opt = nullptr;
  CLI::Option* map_opt = nullptr;

  void attach(CLI::App& cmd) {
    root_opt = cmd.add_option("--data-root", root,
                              std::string("Dataset root directory holding ") +
                                  kIndexFileName)
                   ->check(CLI::ExistingDirectory);
    labels_opt = cmd.add_option("--labels", labels,
                                "Crack labels file, rows of 'path crack_label'")
                     ->check(CLI::ExistingFile);
    policy_opt = cmd.add_option("--policy", policy,
                                "Label policy for images the labels file does "
                                "not cover: strict or proxy")
                     ->check(CLI::IsMember({"strict", "proxy"}));
    split_seed_opt =
        cmd.add_option("--split-seed", split_seed, "Split shuffling seed");
    by_module_opt =
        cmd.add_flag("--split-by-module", split_by_module,
                     "Keep all cells of one physical module inside a single "
                     "split (requires --module-map)");
    map_opt = cmd.add_option("--module-map", module_map,
                             "File mapping image path to module id")
                  ->check(CLI::ExistingFile);
  }

  void apply(DataConfig& cfg) const {
    if (root_opt->count() > 0) cfg.root = root;
    if (labels_opt->count() > 0) cfg.labels_file = labels;
    if (policy_opt->count() > 0) cfg.policy = *parse_label_policy(policy);
    if (split_seed_opt->count() > 0) cfg.split_seed = split_seed;
    if (by_module_opt->count() > 0) cfg.split_by_module = true;
    if (map_opt->count() > 0) cfg.module_map = module_map;
  }
};

ExperimentConfig base_config(const std::string& config_path) {
  return config_path.empty() ? ExperimentConfig{}
                             : load_experiment_config(config_path);
}

void require_data_root(const ExperimentConfig& cfg, const char* command) {
  if (cfg.data.root.empty()) {
    throw std::runtime_error(std::string(command) +
                             ": no dataset configured (set data.root in the "
                             "config file or pass --data-root)");
  }
}

// ---------------------------------------------------------------------------
// prepare-data

struct PrepareFlags {
  std::string out_dir;
  std::string verify_dir;
  std::string labels;
  std::string policy = "strict";
  int count = 40;
  int size = 64;
  int thickness = 3;
  uint64_t seed = 1234;

  CLI::Option* out_opt = nullptr;
  CLI::Option* verify_opt = nullptr;
};

CLI::App* attach_prepare(CLI::App& app, PrepareFlags& f) {
  auto* cmd = app.add_subcommand(
      "prepare-data",
      "Generate the synthetic line-vs-noise set, or verify a dataset index");
  f.out_opt = cmd->add_option("--out", f.out_dir,
                              "Write a synthetic dataset to this directory");
  f.verify_opt =
      cmd->add_option("--verify", f.verify_dir,
                      "Load an existing dataset root and print a summary")
          ->check(CLI::ExistingDirectory);
  f.out_opt->excludes(f.verify_opt);
  cmd->add_option("--count", f.count, "Synthetic image count")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--size", f.size, "Synthetic image side length, pixels")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--thickness", f.thickness,
                  "Drawn line thickness, pixels")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Generator seed");
  cmd->add_option("--labels", f.labels,
                  "Crack labels file for --verify, rows of 'path crack_label'")
      ->check(CLI::ExistingFile);
  cmd->add_option("--policy", f.policy,
                  "Label policy for --verify: strict or proxy")
      ->check(CLI::IsMember({"strict", "proxy"}));
  return cmd;
}

int run_prepare(const PrepareFlags& f) {
  if (f.out_opt->count() == 0 && f.verify_opt->count() == 0) {
    throw std::runtime_error(
        "prepare-data: pass --out to generate a synthetic set or --verify to "
        "check an existing dataset");
  }

  if (f.out_opt->count() > 0) {
    SyntheticSpec spec;
    spec.count = f.count;
    spec.image_size = f.size;
    spec.line_thickness = f.thickness;
    spec.seed = f.seed;
    const SyntheticSet set = write_synthetic_set(f.out_dir, spec);

    // Ground-truth line masks let segmentation output be scored without
    // manual annotation.
    const fs::path mask_dir = set.root / "masks";
    fs::create_directories(mask_dir);
    int mask_count = 0;
    for (const auto& [path, line_mask] : set.line_masks) {
      if (line_mask.empty()) continue;
      SegmentationMask mask;
      mask.height = spec.image_size;
      mask.width = spec.image_size;
      mask.grid = line_mask;
      write_mask_png(mask,
                     mask_dir / (fs::path(path).stem().string() + "_line.png"));
      ++mask_count;
    }
    std::cout << "wrote " << set.samples.size() << " images under '"
              << set.root.string() << "' (index " << kIndexFileName
              << ", labels " << set.labels_file.filename().string() << ", "
              << mask_count << " line masks under masks/)\n";
    return 0;
  }

  const LoadOptions options{*parse_label_policy(f.policy), true};
  const Dataset dataset = load_dataset(
      f.verify_dir, f.labels.empty() ? fs::path{} : fs::path(f.labels),
      options);
  const int proxy = static_cast<int>(
      std::count_if(dataset.samples.begin(), dataset.samples.end(),
                    [](const ImageSample& s) { return s.label_from_proxy; }));
  std::cout << "dataset '" << dataset.root.string() << "': "
            << dataset.samples.size() << " samples, "
            << dataset.count(CrackLabel::kCrack) << " crack / "
            << dataset.count(CrackLabel::kNonCrack) << " non-crack, "
            << dataset.count(CellType::kMono) << " mono / "
            << dataset.count(CellType::kPoly) << " poly\n";
  std::cout << "index checksum " << hex64(dataset.index_checksum);
  if (!f.labels.empty()) {
    std::cout << ", labels checksum " << hex64(dataset.labels_checksum);
  }
  std::cout << "\n";
  if (proxy > 0) {
    std::cout << proxy
              << " labels derived from defect probability (proxy policy), NOT "
                 "manual crack annotations\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  std::string config_path;
  std::string out_dir;
  std::string p_value;
  std::string optimizer;
  std::string selection;
  std::string pretrained;
  int epochs = 0;
  int batch_size = 0;
  int patience = 0;
  int input_size = 0;
  double learning_rate = 0.0;
  double weight_decay = 0.0;
  double stop_train_acc = 0.0;
  uint64_t seed = 0;
  bool no_balance = false;
  bool no_augment = false;
  DataFlags data;

  CLI::Option* p_opt = nullptr;
  CLI::Option* optimizer_opt = nullptr;
  CLI::Option* selection_opt = nullptr;
  CLI::Option* pretrained_opt = nullptr;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* patience_opt = nullptr;
  CLI::Option* input_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* wd_opt = nullptr;
  CLI::Option* stop_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* no_balance_opt = nullptr;
  CLI::Option* no_augment_opt = nullptr;
};

CLI::App* attach_train(CLI::App& app, TrainFlags& f) {
  auto* cmd = app.add_subcommand(
      "train", "Train one classifier and evaluate it on the test split");
  cmd->add_option("--config", f.config_path, "Experiment config file (JSON)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out_dir, "Run output directory")->required();
  f.p_opt = cmd->add_option("--p", f.p_value,
                            "Pooling exponent: a number >= 1, or 'inf'");
  f.seed_opt = cmd->add_option("--seed", f.seed, "Training and init seed");
  f.epochs_opt = cmd->add_option("--epochs", f.epochs, "Epoch budget")
                     ->check(CLI::PositiveNumber);
  f.batch_opt = cmd->add_option("--batch-size", f.batch_size, "Batch size")
                    ->check(CLI::PositiveNumber);
  f.lr_opt = cmd->add_option("--lr", f.learning_rate, "Learning rate");
  f.wd_opt = cmd->add_option("--weight-decay", f.weight_decay, "Weight decay");
  f.optimizer_opt = cmd->add_option("--optimizer", f.optimizer,
                                    "Optimizer: adam or sgd")
                        ->check(CLI::IsMember({"adam", "sgd"}));
  f.selection_opt =
      cmd->add_option("--selection", f.selection,
                      "Checkpoint selection criterion: val_loss or val_f1")
          ->check(CLI::IsMember({"val_loss", "val_f1"}));
  f.patience_opt = cmd->add_option(
      "--patience", f.patience,
      "Early-stopping patience in epochs, 0 disables early stopping");
  f.pretrained_opt = cmd->add_option("--pretrained", f.pretrained,
                                     "Pretrained backbone weights archive")
                         ->check(CLI::ExistingFile);
  f.input_opt = cmd->add_option("--input-size", f.input_size,
                                "Square input side length, pixels")
                    ->check(CLI::PositiveNumber);
  f.stop_opt = cmd->add_option("--stop-at-train-acc", f.stop_train_acc,
                               "Stop once confirmed train accuracy reaches "
                               "this value, 0 disables")
                   ->check(CLI::Range(0.0, 1.0));
  f.no_balance_opt = cmd->add_flag("--no-balance", f.no_balance,
                                   "Disable minority oversampling");
  f.no_augment_opt = cmd->add_flag("--no-augment", f.no_augment,
                                   "Disable dihedral augmentation");
  f.data.attach(*cmd);
  return cmd;
}

void apply_train_overrides(const TrainFlags& f, ExperimentConfig& cfg) {
  f.data.apply(cfg.data);
  if (f.p_opt->count() > 0) cfg.model.pooling.p = parse_single_p(f.p_value);
  if (f.seed_opt->count() > 0) cfg.train.seed = f.seed;
  if (f.epochs_opt->count() > 0) cfg.train.epochs = f.epochs;
  if (f.batch_opt->count() > 0) cfg.train.batch_size = f.batch_size;
  if (f.lr_opt->count() > 0) cfg.train.learning_rate = f.learning_rate;
  if (f.wd_opt->count() > 0) cfg.train.weight_decay = f.weight_decay;
  if (f.optimizer_opt->count() > 0) {
    cfg.train.optimizer = *parse_optimizer(f.optimizer);
  }
  if (f.selection_opt->count() > 0) {
    cfg.train.selection = *parse_selection(f.selection);
  }
  if (f.patience_opt->count() > 0) cfg.train.early_stop_patience = f.patience;
  if (f.pretrained_opt->count() > 0) {
    cfg.model.pretrained_weights_path = f.pretrained;
  }
  if (f.input_opt->count() > 0) cfg.model.input_size = f.input_size;
  if (f.stop_opt->count() > 0) {
    cfg.train.stop_at_train_accuracy = f.stop_train_acc;
  }
  if (f.no_balance_opt->count() > 0) cfg.train.balance = false;
  if (f.no_augment_opt->count() > 0) cfg.train.augment = false;
}

int run_train(const TrainFlags& f) {
  ExperimentConfig cfg = base_config(f.config_path);
  apply_train_overrides(f, cfg);
  // A single run behaves exactly like a one-cell sweep at repeat 0.
  cfg.model.seed = cfg.train.seed;
  cfg.validate();
  require_data_root(cfg, "train");

  const fs::path out(f.out_dir);
  fs::create_directories(out);
  const auto [dataset, split] = load_and_split(cfg);
  const uint64_t digest = split_checksum(split);
  log::info("train: split train " + std::to_string(split.train.size()) +
            " / val " + std::to_string(split.val.size()) + " / test " +
            std::to_string(split.test.size()) + ", checksum " + hex64(digest));

  {
    ExperimentConfig resolved = cfg;
    resolved.output_dir = out.string();
    save_experiment_config(resolved, out / "config.json");
  }

  Model model = build_model(cfg.model);
  const fs::path history = out / "history.jsonl";
  const TrainResult result =
      train(model, cfg.data.root, split, cfg.train, &history);
  const MetricsReport test =
      evaluate(model, cfg.data.root, split.test, cfg.train.batch_size);

  const nlohmann::json extra{
      {"label_policy", to_string(cfg.data.policy)},
      {"bn_statistics", "fine-tuned"},
      {"split_checksum", hex64(digest)},
  };
  model.save_checkpoint(out / "checkpoint.ckpt", &extra);

  nlohmann::ordered_json j;
  j["split"] = {{"seed", split.seed},
                {"train", split.train.size()},
                {"val", split.val.size()},
                {"test", split.test.size()},
                {"checksum", hex64(digest)}};
  j["epochs_run"] = result.history.size();
  j["best_epoch"] = result.best_epoch;
  j["best_val_loss"] = result.best_val_loss;
  j["stopped_early"] = result.stopped_early;
  j["reached_target_accuracy"] = result.reached_target_accuracy;
  j["val"] = nlohmann::json(result.best_val_metrics);
  j["test"] = nlohmann::json(test);
  j["provenance"] = {{"version", kVersion}, {"git_revision", kGitRevision}};
  std::ofstream metrics_out(out / "metrics.json", std::ios::trunc);
  if (!metrics_out) {
    throw std::runtime_error("train: cannot write '" +
                             (out / "metrics.json").string() + "'");
  }
  metrics_out << j.dump(2) << '\n';

  std::cout << "trained " << result.history.size() << " epochs (best epoch "
            << result.best_epoch << "), checkpoint '"
            << (out / "checkpoint.ckpt").string() << "'\n";
  std::cout << "test split (" << split.test.size() << " samples):\n";
  print_metrics(test);
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalFlags {
  std::string checkpoint;
  std::string config_path;
  std::string split = "test";
  std::string json_out;
  int batch_size = 8;
  DataFlags data;
};

CLI::App* attach_evaluate(CLI::App& app, EvalFlags& f) {
  auto* cmd = app.add_subcommand(
      "evaluate", "Evaluate a trained checkpoint on a dataset split");
  cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--config", f.config_path,
                  "Experiment config file; its data section selects the "
                  "dataset and split")
      ->check(CLI::ExistingFile);
  cmd->add_option("--split", f.split, "Split to evaluate")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  cmd->add_option("--batch-size", f.batch_size, "Batch size")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--json", f.json_out, "Also write the metrics to this file");
  f.data.attach(*cmd);
  return cmd;
}

int run_evaluate(const EvalFlags& f) {
  ExperimentConfig cfg = base_config(f.config_path);
  f.data.apply(cfg.data);
  cfg.data.validate();
  require_data_root(cfg, "evaluate");

  Model model = Model::load_checkpoint(f.checkpoint);
  const auto [dataset, split] = load_and_split(cfg);
  const std::vector<ImageSample>* samples = &split.test;
  if (f.split == "train") {
    samples = &split.train;
  } else if (f.split == "val") {
    samples = &split.val;
  } else if (f.split == "all") {
    samples = &dataset.samples;
  }

  const MetricsReport metrics =
      evaluate(model, cfg.data.root, *samples, f.batch_size);
  std::cout << "checkpoint '" << f.checkpoint << "', split '" << f.split
            << "' (" << samples->size() << " samples, pooling p = "
            << p_name(model.config().pooling.p) << "):\n";
  print_metrics(metrics);

  if (!f.json_out.empty()) {
    nlohmann::ordered_json j;
    j["checkpoint"] = f.checkpoint;
    j["split"] = f.split;
    j["samples"] = samples->size();
    j["metrics"] = nlohmann::json(metrics);
    j["provenance"] = {{"version", kVersion}, {"git_revision", kGitRevision}};
    std::ofstream out(f.json_out, std::ios::trunc);
    if (!out) {
      throw std::runtime_error("evaluate: cannot write '" + f.json_out + "'");
    }
    out << j.dump(2) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepFlags {
  std::string config_path;
  std::string out_dir;
  std::string p_list;
  std::string cell;
  uint64_t seed = 0;
  int repeats = 0;
  int jobs = 1;
  bool collect_only = false;
  DataFlags data;

  CLI::Option* p_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* repeats_opt = nullptr;
  CLI::Option* cell_opt = nullptr;
  CLI::Option* collect_opt = nullptr;
};

CLI::App* attach_sweep(CLI::App& app, SweepFlags& f) {
  auto* cmd = app.add_subcommand(
      "sweep",
      "Train one model per pooling exponent on a shared split and tabulate "
      "test metrics");
  cmd->add_option("--config", f.config_path, "Experiment config file (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out_dir, "Sweep output directory")->required();
  f.p_opt = cmd->add_option(
      "--p", f.p_list,
      "Comma-separated pooling exponents, e.g. 1,2,3,4,5,9,inf");
  f.seed_opt = cmd->add_option("--seed", f.seed, "Base seed; repeat k adds k");
  f.repeats_opt = cmd->add_option("--repeats", f.repeats,
                                  "Training repeats per exponent")
                      ->check(CLI::PositiveNumber);
  cmd->add_option("--jobs", f.jobs,
                  "Cells trained concurrently, each in its own process")
      ->check(CLI::PositiveNumber);
  f.collect_opt = cmd->add_flag(
      "--collect-only", f.collect_only,
      "Skip training and rebuild the report from existing cell records");
  f.cell_opt = cmd->add_option("--cell", f.cell,
                               "Run a single '<p>:<repeat>' cell (internal, "
                               "used by the parallel driver)")
                   ->group("");
  f.cell_opt->excludes(f.collect_opt);
  f.data.attach(*cmd);
  return cmd;
}

std::pair<double, int> parse_cell_ref(const std::string& text) {
  const size_t colon = text.find(':');
  if (colon == std::string::npos) {
    throw std::invalid_argument("--cell expects '<p>:<repeat>', got '" + text +
                                "'");
  }
  const double p = parse_single_p(text.substr(0, colon));
  int repeat = 0;
  try {
    size_t used = 0;
    const std::string tail = text.substr(colon + 1);
    repeat = std::stoi(tail, &used);
    if (used != tail.size()) throw std::invalid_argument(tail);
  } catch (const std::exception&) {
    throw std::invalid_argument("--cell expects '<p>:<repeat>', got '" + text +
                                "'");
  }
  return {p, repeat};
}

pid_t spawn_cell(const fs::path& config_path, const fs::path& out_dir,
                 double p, int repeat, const fs::path& log_path) {
  std::vector<std::string> args{
      "/proc/self/exe", "sweep",
      "--config",       config_path.string(),
      "--out",          out_dir.string(),
      "--cell",         p_name(p) + ":" + std::to_string(repeat),
  };
  std::vector<char*> argv;
  argv.reserve(args.size() + 1);
  for (std::string& arg : args) argv.push_back(arg.data());
  argv.push_back(nullptr);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, 1, log_path.c_str(),
                                   O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_adddup2(&actions, 1, 2);
  pid_t pid = -1;
  const int rc = posix_spawn(&pid, "/proc/self/exe", &actions, nullptr,
                             argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) {
    log::error(std::string("sweep: failed to start worker: ") +
               std::strerror(rc));
    return -1;
  }
  return pid;
}

int run_parallel_sweep(const ExperimentConfig& cfg, const fs::path& out_dir,
                       int jobs) {
  fs::create_directories(out_dir);
  {
    ExperimentConfig resolved = cfg;
    resolved.output_dir = out_dir.string();
    save_experiment_config(resolved, out_dir / "config.json");
  }

  struct CellJob {
    double p;
    int repeat;
  };
  std::vector<CellJob> pending;
  for (const double p : cfg.sweep.p_values) {
    for (int repeat = 0; repeat < cfg.sweep.repeats; ++repeat) {
      pending.push_back({p, repeat});
    }
  }
  log::info("sweep: " + std::to_string(pending.size()) + " cells across " +
            std::to_string(jobs) + " worker processes");

  size_t next = 0;
  std::map<pid_t, CellJob> running;
  while (next < pending.size() || !running.empty()) {
    while (next < pending.size() && static_cast<int>(running.size()) < jobs) {
      const CellJob job = pending[next];
      const fs::path run_dir = out_dir / ("p" + p_name(job.p)) /
                               ("run" + std::to_string(job.repeat));
      fs::create_directories(run_dir);
      const pid_t pid = spawn_cell(out_dir / "config.json", out_dir, job.p,
                                   job.repeat, run_dir / "log.txt");
      if (pid < 0) {
        // The collector reports the unstarted cells as missing.
        next = pending.size();
        break;
      }
      log::info("sweep: started p = " + p_name(job.p) + ", repeat " +
                std::to_string(job.repeat) + " (pid " + std::to_string(pid) +
                ", log " + (run_dir / "log.txt").string() + ")");
      running.emplace(pid, job);
      ++next;
    }
    if (running.empty()) break;

    int status = 0;
    const pid_t done = waitpid(-1, &status, 0);
    if (done < 0) {
      if (errno == EINTR) continue;
      log::error(std::string("sweep: waitpid failed: ") +
                 std::strerror(errno));
      break;
    }
    const auto it = running.find(done);
    if (it == running.end()) continue;
    const CellJob job = it->second;
    running.erase(it);
    if (WIFEXITED(status) && WEXITSTATUS(status) == 0) {
      log::info("sweep: finished p = " + p_name(job.p) + ", repeat " +
                std::to_string(job.repeat));
    } else {
      const std::string how =
          WIFEXITED(status)
              ? "exit code " + std::to_string(WEXITSTATUS(status))
              : "signal " + std::to_string(WTERMSIG(status));
      log::warn("sweep: worker for p = " + p_name(job.p) + ", repeat " +
                std::to_string(job.repeat) + " failed (" + how + ")");
    }
  }

  const SweepReport report = collect_sweep_report(cfg, out_dir);
  return report.complete ? 0 : 2;
}

int run_sweep_command(const SweepFlags& f) {
  ExperimentConfig cfg = base_config(f.config_path);
  f.data.apply(cfg.data);
  if (f.p_opt->count() > 0) cfg.sweep.p_values = parse_p_list(f.p_list);
  if (f.seed_opt->count() > 0) cfg.train.seed = f.seed;
  if (f.repeats_opt->count() > 0) cfg.sweep.repeats = f.repeats;
  cfg.validate();
  require_data_root(cfg, "sweep");

  if (f.cell_opt->count() > 0) {
    const auto [p, repeat] = parse_cell_ref(f.cell);
    const SweepCell cell = run_sweep_cell(cfg, f.out_dir, p, repeat);
    return cell.ok ? 0 : 2;
  }
  if (f.collect_only) {
    const SweepReport report = collect_sweep_report(cfg, f.out_dir);
    std::cout << (fs::path(f.out_dir) / "report.txt").string() << "\n";
    return report.complete ? 0 : 2;
  }
  if (f.jobs > 1) {
    const int code = run_parallel_sweep(cfg, f.out_dir, f.jobs);
    std::cout << (fs::path(f.out_dir) / "report.txt").string() << "\n";
    return code;
  }
  const SweepReport report = run_sweep(cfg, f.out_dir);
  std::cout << (fs::path(f.out_dir) / "report.txt").string() << "\n";
  return report.complete ? 0 : 2;
}

// ---------------------------------------------------------------------------
// segment

struct SegmentFlags {
  std::string checkpoint;
  std::string out_dir;
  std::string polarity = "auto";
  std::vector<std::string> images;
  bool no_upsample = false;
};

CLI::App* attach_segment(CLI::App& app, SegmentFlags& f) {
  auto* cmd = app.add_subcommand(
      "segment", "Derive binary crack masks from a trained checkpoint");
  cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out_dir, "Output directory")->required();
  cmd->add_option("--polarity", f.polarity,
                  "Heatmap polarity: direct, inverted, or auto (refused for "
                  "p <= 4, where no default is defensible)")
      ->check(CLI::IsMember({"direct", "inverted", "auto"}));
  cmd->add_flag("--no-upsample", f.no_upsample,
                "Keep masks at activation-map resolution instead of the "
                "input resolution");
  cmd->add_option("images", f.images, "Input images")
      ->required()
      ->check(CLI::ExistingFile);
  return cmd;
}

int run_segment(const SegmentFlags& f) {
  Model model = Model::load_checkpoint(f.checkpoint);
  const double p = model.config().pooling.p;
  const std::optional<PolarityMode> mode =
      f.polarity == "auto" ? default_polarity(p) : parse_polarity(f.polarity);
  if (!mode) {
    throw std::runtime_error(
        "segment: no default polarity for p = " + p_name(p) +
        "; small exponents need an explicit --polarity direct|inverted");
  }

  const fs::path out(f.out_dir);
  fs::create_directories(out);
  const int input_size = model.config().input_size;
  const std::vector<std::string> stems = disambiguated_stems(f.images);

  for (size_t i = 0; i < f.images.size(); ++i) {
    const fs::path image_path(f.images[i]);
    const Tensor image = preprocess_image(image_path, input_size);
    const HeatmapExtraction extraction = extract_heatmap(model, image);

    SegmentationMask mask = apply_gate(
        extraction.classification, threshold_mask(extraction.heatmap, *mode));
    if (!f.no_upsample) mask = upsample_mask(mask, input_size, input_size);

    const fs::path mask_path = out / (stems[i] + "_mask.png");
    write_mask_png(mask, mask_path);
    write_mask_sidecar(out / (stems[i] + "_mask.json"), f.images[i], p, *mode,
                       mask, extraction.classification);

    std::cout << f.images[i] << ": "
              << to_string(extraction.classification.label) << " (p_crack "
              << std::fixed << std::setprecision(4)
              << extraction.classification.probabilities[0] << "), foreground "
              << mask.foreground() << "/" << (mask.height * mask.width)
              << (mask.gated ? " (suppressed by the classification gate)" : "")
              << " -> " << mask_path.string() << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// panel

struct PanelFlags {
  std::vector<std::string> checkpoints;
  std::vector<std::string> images;
  std::string out_dir;
  std::string polarity = "auto";
  bool overlay = false;
};

CLI::App* attach_panel(CLI::App& app, PanelFlags& f) {
  auto* cmd = app.add_subcommand(
      "panel",
      "Render per-image originals plus one heatmap per checkpoint, "
      "optionally with segmentation overlays");
  cmd->add_option("--checkpoint", f.checkpoints,
                  "'<p>=<file>' pair; repeat for several exponents")
      ->required();
  cmd->add_option("--out", f.out_dir, "Output directory")->required();
  cmd->add_flag("--overlay", f.overlay,
                "Also write the gated segmentation mask per image and "
                "exponent");
  cmd->add_option("--polarity", f.polarity,
                  "Polarity for --overlay masks: direct, inverted, or auto")
      ->check(CLI::IsMember({"direct", "inverted", "auto"}));
  cmd->add_option("images", f.images, "Input images")
      ->required()
      ->check(CLI::ExistingFile);
  return cmd;
}

int run_panel(const PanelFlags& f) {
  std::map<double, fs::path> checkpoints;
  for (const std::string& entry : f.checkpoints) {
    const size_t eq = entry.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--checkpoint expects '<p>=<file>', got '" +
                                  entry + "'");
    }
    const double p = parse_single_p(entry.substr(0, eq));
    checkpoints[p] = fs::path(entry.substr(eq + 1));
  }
  const std::vector<fs::path> images(f.images.begin(), f.images.end());
  const PanelResult result =
      emit_panel(checkpoints, images, f.out_dir, f.overlay, f.polarity);
  for (const fs::path& path : result.written) {
    std::cout << path.string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "crackseg: weakly supervised crack segmentation on EL cell images"};
  app.require_subcommand(1);
  bool verbose = false;
  bool quiet = false;
  auto* verbose_opt =
      app.add_flag("-v,--verbose", verbose, "Also print debug logging");
  auto* quiet_opt =
      app.add_flag("-q,--quiet", quiet, "Print only warnings and errors");
  verbose_opt->excludes(quiet_opt);
  app.set_version_flag("--version", std::string("crackseg ") +
                                        crackseg::kVersion + " (" +
                                        crackseg::kGitRevision + ")");

  PrepareFlags prepare_flags;
  TrainFlags train_flags;
  EvalFlags eval_flags;
  SweepFlags sweep_flags;
  SegmentFlags segment_flags;
  PanelFlags panel_flags;
  CLI::App* prepare_cmd = attach_prepare(app, prepare_flags);
  CLI::App* train_cmd = attach_train(app, train_flags);
  CLI::App* eval_cmd = attach_evaluate(app, eval_flags);
  CLI::App* sweep_cmd = attach_sweep(app, sweep_flags);
  CLI::App* segment_cmd = attach_segment(app, segment_flags);
  CLI::App* panel_cmd = attach_panel(app, panel_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  crackseg::log::set_level(verbose ? crackseg::log::Level::kDebug
                           : quiet ? crackseg::log::Level::kWarn
                                   : crackseg::log::Level::kInfo);

  try {
    if (prepare_cmd->parsed()) return run_prepare(prepare_flags);
    if (train_cmd->parsed()) return run_train(train_flags);
    if (eval_cmd->parsed()) return run_evaluate(eval_flags);
    if (sweep_cmd->parsed()) return run_sweep_command(sweep_flags);
    if (segment_cmd->parsed()) return run_segment(segment_flags);
    if (panel_cmd->parsed()) return run_panel(panel_flags);
  } catch (const std::exception& e) {
    crackseg::log::error(e.what());
    return 1;
  }
  return 0;
}
