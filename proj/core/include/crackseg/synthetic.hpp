// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <vector>

#include "crackseg/data.hpp"

namespace crackseg {

/// Parameters of the synthetic line-vs-noise set: crack images carry one
/// bright diagonal line over a noisy background, non-crack images are
/// background only. The drawn line's pixels are recorded so segmentation
/// coverage can be scored against a known ground truth.
struct SyntheticSpec {
  int count = 40;
  int image_size = 64;
  uint64_t seed = 1234;
  int line_thickness = 3;
  float background_level = 100.0f;
  float background_noise = 10.0f;
  float line_level = 235.0f;
};

struct SyntheticImage {
  std::vector<uint8_t> pixels;     // image_size^2 grayscale
  std::vector<uint8_t> line_mask;  // 1 on drawn line pixels, all 0 for non-crack
  CrackLabel label = CrackLabel::kNonCrack;
};

SyntheticImage make_synthetic_image(const SyntheticSpec& spec, CrackLabel label,
                                    std::mt19937_64& rng);

/// A generated set written to disk in the dataset layout (index file,
/// crack labels file, images/ directory) so it flows through the standard
/// loading path.
struct SyntheticSet {
  std::filesystem::path root;
  std::filesystem::path labels_file;
  std::vector<ImageSample> samples;
  /// Ground-truth line pixels keyed by sample path; empty vector for
  /// non-crack images.
  std::map<std::string, std::vector<uint8_t>> line_masks;
};

/// Writes spec.count images, alternating crack / non-crack and
/// mono / poly cell tags, plus the index and labels files.
SyntheticSet write_synthetic_set(const std::filesystem::path& root,
                                 const SyntheticSpec& spec);

}  // namespace crackseg
