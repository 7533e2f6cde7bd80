// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crackseg/model.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

enum class CellType { kMono, kPoly };
const char* to_string(CellType type);
std::optional<CellType> parse_cell_type(const std::string& text);

/// How crack labels are attached to indexed images that the labels file
/// does not cover: kStrict refuses them, kProxy derives the label from the
/// defect probability (>= 0.5 means crack). Proxy labels are an
/// approximation and are flagged as such everywhere downstream.
enum class LabelPolicy { kStrict, kProxy };
const char* to_string(LabelPolicy policy);
std::optional<LabelPolicy> parse_label_policy(const std::string& text);

/// One indexed cell image. Pixels stay on disk; `path` is relative to the
/// dataset root.
struct ImageSample {
  std::string path;
  float defect_probability = 0.0f;  // one of {0, 1/3, 2/3, 1}
  CellType cell_type = CellType::kMono;
  CrackLabel crack_label = CrackLabel::kNonCrack;
  bool label_from_proxy = false;
};

/// Name of the index file expected inside the dataset root, rows of
/// `path defect_probability cell_type`.
inline constexpr const char* kIndexFileName = "labels.csv";

/// Per-channel statistics of the pretraining corpus, applied after
/// scaling pixels to [0, 1].
inline constexpr std::array<float, 3> kChannelMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kChannelStd{0.229f, 0.224f, 0.225f};

struct LoadOptions {
  LabelPolicy policy = LabelPolicy::kStrict;
  /// Every listed image file must exist (hard error otherwise). Disabled
  /// only by tests that exercise index parsing alone.
  bool verify_images_exist = true;
};

struct Dataset {
  std::filesystem::path root;
  std::vector<ImageSample> samples;
  uint64_t index_checksum = 0;   // FNV-1a over the index file bytes
  uint64_t labels_checksum = 0;  // FNV-1a over the labels file, 0 when none

  int count(CrackLabel label) const;
  int count(CellType type) const;
};

/// Reads the dataset index at root plus an optional crack-labels file
/// (rows of `path crack_label`, one header line). Pass an empty
/// labels_file path to rely purely on the policy. Unlabeled images are
/// rejected (kStrict) or proxy-labeled (kProxy).
Dataset load_dataset(const std::filesystem::path& root,
                     const std::filesystem::path& labels_file,
                     const LoadOptions& options = {});

/// Decodes one grayscale image, checks it is exactly
/// expected_size x expected_size (no silent resizing), replicates it to
/// 3 channels, scales to [0, 1] and normalizes per channel. Returns
/// [3, S, S].
Tensor preprocess_image(const std::filesystem::path& image_path,
                        int expected_size = 300);
Tensor preprocess(const std::filesystem::path& root, const ImageSample& sample,
                  int expected_size = 300);

/// Stacks identically shaped [C, H, W] images into [N, C, H, W].
Tensor make_batch(const std::vector<Tensor>& images);

/// The eight symmetries of the square: transform = r + 4 * f applies a
/// counter-clockwise rotation by r * 90 degrees, then a horizontal flip
/// when f is 1. Transform 0 is the identity. Input must be [C, H, H].
Tensor apply_dihedral(const Tensor& chw, int transform);

struct SplitRatios {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;

  void validate() const;  // each positive, sum within 1e-9 of 1
};

struct DatasetSplit {
  std::vector<ImageSample> train, val, test;
  uint64_t seed = 0;
  SplitRatios ratios{};
};

/// Deterministic split stratified jointly by (crack_label, cell_type),
/// apportioned per stratum by largest remainder. Guarantees both crack
/// classes appear in every split; classes with fewer than 3 samples are
/// rejected with a hint to change the ratios.
DatasetSplit stratified_split(const std::vector<ImageSample>& samples,
                              const SplitRatios& ratios, uint64_t seed);

/// Split that keeps whole groups (for example all cells cut from one
/// module) inside a single split, trading stratification accuracy for
/// leakage safety. `group_of_path` maps sample path to a group id; paths
/// without an entry form singleton groups.
DatasetSplit stratified_group_split(
    const std::vector<ImageSample>& samples, const SplitRatios& ratios,
    uint64_t seed, const std::map<std::string, std::string>& group_of_path);

/// Reads a `path group_id` mapping file (whitespace-delimited, '#'
/// comments) for stratified_group_split.
std::map<std::string, std::string> load_group_map(
    const std::filesystem::path& path);

/// Order-sensitive digest of the split membership, used to prove sweep
/// runs consumed identical splits.
uint64_t split_checksum(const DatasetSplit& split);

/// Deterministic per-epoch batch schedule over a training split, with
/// optional minority oversampling to roughly 1:1 and the dihedral
/// augmentations (crack presence is invariant under all eight).
class TrainingStream {
 public:
  struct Item {
    size_t sample;  // index into samples()
    int transform;  // 0..7, 0 when augmentation is off
  };

  TrainingStream(std::vector<ImageSample> samples, int batch_size, bool balance,
                 bool augment, uint64_t seed);

  const std::vector<ImageSample>& samples() const { return samples_; }
  /// Roster length after oversampling; constant across epochs.
  size_t epoch_size() const { return epoch_size_; }
  int batch_size() const { return batch_size_; }

  /// Batches for one epoch; a fixed (seed, epoch) pair always yields the
  /// identical schedule. The final batch may be short.
  std::vector<std::vector<Item>> epoch_batches(int epoch) const;

 private:
  std::vector<ImageSample> samples_;
  int batch_size_;
  bool balance_;
  bool augment_;
  uint64_t seed_;
  size_t epoch_size_;
  std::vector<size_t> base_roster_;     // every sample once
  std::vector<size_t> minority_pool_;   // indices eligible for oversampling
  size_t extra_draws_ = 0;
};

TrainingStream make_training_stream(const std::vector<ImageSample>& samples,
                                    int batch_size, bool balance, bool augment,
                                    uint64_t seed);

/// FNV-1a, 64-bit.
uint64_t fnv1a64(std::span<const unsigned char> bytes);
uint64_t fnv1a64_file(const std::filesystem::path& path);

}  // namespace crackseg
