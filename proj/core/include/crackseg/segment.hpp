// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crackseg/model.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

/// For small exponents the trained maps tend to carry cracks as LOW
/// activations; inverted mode negates the map before thresholding.
enum class PolarityMode { kDirect, kInverted };
const char* to_string(PolarityMode mode);
std::optional<PolarityMode> parse_polarity(const std::string& text);

/// Default polarity by pooling exponent: direct for p > 4 and the max
/// case; nullopt below that, where no automatic rule is defensible and
/// the caller must choose explicitly.
std::optional<PolarityMode> default_polarity(double p);

struct SegmentationMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> grid;  // row-major, entries 0 or 1
  bool gated = false;         // true when the classification gate zeroed it

  int64_t foreground() const;
};

struct HeatmapExtraction {
  Tensor heatmap;  // [H', W'], the crack channel of the activation maps
  Classification classification;
};

/// One forward pass: returns the crack-channel map and the classification
/// together, so downstream consumers never recompute or drift.
HeatmapExtraction extract_heatmap(Model& model, const Tensor& image);

/// Dynamic threshold: mask_i = 1 iff y_i > max(Y) / 2, applied to the
/// negated map under inverted polarity. The threshold tracks the map's
/// own maximum because activations are scaled arbitrarily. An all-equal
/// map yields all zeros.
SegmentationMask threshold_mask(std::span<const double> heatmap, int height,
                                int width, PolarityMode polarity);
SegmentationMask threshold_mask(const Tensor& heatmap, PolarityMode polarity);

/// Classified non-crack suppresses the mask entirely.
SegmentationMask apply_gate(const Classification& classification,
                            SegmentationMask mask);

/// Nearest-neighbor upsampling to target_height x target_width; rejects
/// targets smaller than the source. Output stays binary.
SegmentationMask upsample_mask(const SegmentationMask& mask, int target_height,
                               int target_width);

/// Lossless 8-bit export, foreground 255 / background 0.
void write_mask_png(const SegmentationMask& mask,
                    const std::filesystem::path& path);

/// Sidecar record accompanying an exported mask.
void write_mask_sidecar(const std::filesystem::path& path,
                        const std::string& image_path, double p,
                        PolarityMode polarity, const SegmentationMask& mask,
                        const Classification& classification);

}  // namespace crackseg
