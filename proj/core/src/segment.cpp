// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/segment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "crackseg/data.hpp"
#include "crackseg/logging.hpp"
#include "crackseg/pooling.hpp"

namespace crackseg {

const char* to_string(PolarityMode mode) {
  return mode == PolarityMode::kDirect ? "direct" : "inverted";
}

std::optional<PolarityMode> parse_polarity(const std::string& text) {
  if (text == "direct") return PolarityMode::kDirect;
  if (text == "inverted") return PolarityMode::kInverted;
  return std::nullopt;
}

std::optional<PolarityMode> default_polarity(double p) {
  if (std::isinf(p) || p > 4.0) return PolarityMode::kDirect;
  return std::nullopt;
}

int64_t SegmentationMask::foreground() const {
  return std::count_if(grid.begin(), grid.end(),
                       [](uint8_t v) { return v != 0; });
}

HeatmapExtraction extract_heatmap(Model& model, const Tensor& image) {
  if (image.ndim() != 3) {
    throw std::invalid_argument("extract_heatmap: expected [3, S, S] image, got " +
                                image.shape_str());
  }
  const bool was_training = model.is_training();
  model.train_mode(false);
  const ForwardResult fwd = model.forward(make_batch({image}));
  model.train_mode(was_training);

  const ActivationMaps maps = image_maps(fwd, 0);
  const auto crack = maps.channel(ActivationMaps::kCrackChannel);

  HeatmapExtraction out;
  out.classification = classify(fwd.scores[0]);
  out.heatmap = Tensor({maps.height(), maps.width()});
  std::copy(crack.begin(), crack.end(), out.heatmap.data());

  // §-style diagnostic only: small exponents tend to drive this mean up,
  // which is what motivates the inverted polarity option.
  const double mean =
      std::accumulate(crack.begin(), crack.end(), 0.0) /
      static_cast<double>(crack.size());
  std::ostringstream note;
  note << "segment: crack map mean " << mean << ", max "
       << *std::max_element(crack.begin(), crack.end()) << ", label "
       << to_string(out.classification.label);
  log::debug(note.str());
  return out;
}

SegmentationMask threshold_mask(std::span<const double> heatmap, int height,
                                int width, PolarityMode polarity) {
  if (height < 1 || width < 1 ||
      static_cast<size_t>(height) * static_cast<size_t>(width) != heatmap.size()) {
    throw std::invalid_argument(
        "threshold_mask: heatmap size " + std::to_string(heatmap.size()) +
        " does not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  for (size_t i = 0; i < heatmap.size(); ++i) {
    if (!std::isfinite(heatmap[i])) {
      throw std::invalid_argument("threshold_mask: non-finite value at index " +
                                  std::to_string(i));
    }
  }

  const double flip = polarity == PolarityMode::kInverted ? -1.0 : 1.0;
  double lo = flip * heatmap[0];
  double hi = lo;
  for (size_t i = 1; i < heatmap.size(); ++i) {
    const double v = flip * heatmap[i];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }

  SegmentationMask mask;
  mask.height = height;
  mask.width = width;
  mask.grid.assign(heatmap.size(), 0);
  // An all-equal map carries no contrast to segment; it stays background
  // rather than flooding the image when the constant is positive.
  if (hi > lo) {
    const double threshold = hi / 2.0;
    for (size_t i = 0; i < heatmap.size(); ++i) {
      mask.grid[i] = flip * heatmap[i] > threshold ? 1 : 0;
    }
  }
  return mask;
}

SegmentationMask threshold_mask(const Tensor& heatmap, PolarityMode polarity) {
  if (heatmap.ndim() != 2) {
    throw std::invalid_argument("threshold_mask: expected [H, W] heatmap, got " +
                                heatmap.shape_str());
  }
  std::vector<double> values(heatmap.data(), heatmap.data() + heatmap.numel());
  return threshold_mask(values, heatmap.dim(0), heatmap.dim(1), polarity);
}

SegmentationMask apply_gate(const Classification& classification,
                            SegmentationMask mask) {
  if (classification.label == CrackLabel::kNonCrack) {
    std::fill(mask.grid.begin(), mask.grid.end(), uint8_t{0});
    mask.gated = true;
  }
  return mask;
}

SegmentationMask upsample_mask(const SegmentationMask& mask, int target_height,
                               int target_width) {
  if (mask.height < 1 || mask.width < 1) {
    throw std::invalid_argument("upsample_mask: empty source mask");
  }
  if (target_height < mask.height || target_width < mask.width) {
    throw std::invalid_argument(
        "upsample_mask: target " + std::to_string(target_width) + "x" +
        std::to_string(target_height) + " is smaller than source " +
        std::to_string(mask.width) + "x" + std::to_string(mask.height));
  }
  SegmentationMask out;
  out.height = target_height;
  out.width = target_width;
  out.gated = mask.gated;
  out.grid.resize(static_cast<size_t>(target_height) * target_width);
  for (int y = 0; y < target_height; ++y) {
    const int sy = static_cast<int>(static_cast<int64_t>(y) * mask.height /
                                    target_height);
    for (int x = 0; x < target_width; ++x) {
      const int sx = static_cast<int>(static_cast<int64_t>(x) * mask.width /
                                      target_width);
      out.grid[static_cast<size_t>(y) * target_width + x] =
          mask.grid[static_cast<size_t>(sy) * mask.width + sx];
    }
  }
  return out;
}

void write_mask_png(const SegmentationMask& mask,
                    const std::filesystem::path& path) {
  std::vector<uint8_t> bytes(mask.grid.size());
  std::transform(mask.grid.begin(), mask.grid.end(), bytes.begin(),
                 [](uint8_t v) { return v != 0 ? uint8_t{255} : uint8_t{0}; });
  const cv::Mat mat(mask.height, mask.width, CV_8UC1, bytes.data());
  if (!cv::imwrite(path.string(), mat)) {
    throw std::runtime_error("write_mask_png: failed to write '" +
                             path.string() + "'");
  }
}

void write_mask_sidecar(const std::filesystem::path& path,
                        const std::string& image_path, double p,
                        PolarityMode polarity, const SegmentationMask& mask,
                        const Classification& classification) {
  nlohmann::ordered_json j{
      {"image", image_path},
      {"p", PoolingSpec{p}.p_str()},
      {"polarity", to_string(polarity)},
      {"gated", mask.gated},
      {"label", to_string(classification.label)},
      {"probabilities", classification.probabilities},
      {"scores", classification.scores},
      {"mask",
       {{"height", mask.height},
        {"width", mask.width},
        {"foreground", mask.foreground()}}},
  };
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("write_mask_sidecar: cannot write '" +
                             path.string() + "'");
  }
  out << j.dump(2) << '\n';
}

}  // namespace crackseg
