// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "crackseg/logging.hpp"

namespace crackseg {

namespace {

uint8_t clamp_u8(float v) {
  return static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

void validate_spec(const SyntheticSpec& spec) {
  if (spec.count < 2) {
    throw std::invalid_argument("synthetic: count must be >= 2");
  }
  if (spec.image_size < 32) {
    throw std::invalid_argument("synthetic: image_size must be >= 32");
  }
  if (spec.line_thickness < 1 || spec.line_thickness > spec.image_size / 4) {
    throw std::invalid_argument("synthetic: line_thickness out of range");
  }
}

}  // namespace

SyntheticImage make_synthetic_image(const SyntheticSpec& spec, CrackLabel label,
                                    std::mt19937_64& rng) {
  validate_spec(spec);
  const int n = spec.image_size;
  SyntheticImage out;
  out.label = label;
  out.pixels.resize(static_cast<size_t>(n) * n);
  out.line_mask.assign(static_cast<size_t>(n) * n, 0);

  std::normal_distribution<float> background(spec.background_level,
                                             spec.background_noise);
  for (auto& px : out.pixels) px = clamp_u8(background(rng));
  if (label == CrackLabel::kNonCrack) return out;

  // One bright straight line through the central region, at an angle far
  // enough from the axes to cross many pooling cells diagonally.
  std::uniform_real_distribution<double> angle_pick(0.3, 1.27);  // radians
  std::uniform_real_distribution<double> center_pick(0.3 * n, 0.7 * n);
  std::uniform_real_distribution<float> level_jitter(-10.0f, 10.0f);
  std::bernoulli_distribution mirror(0.5);
  std::normal_distribution<float> line_noise(0.0f, 4.0f);

  double theta = angle_pick(rng);
  if (mirror(rng)) theta = M_PI - theta;  // both diagonal orientations
  const double cx = center_pick(rng);
  const double cy = center_pick(rng);
  const double dx = std::cos(theta);
  const double dy = std::sin(theta);
  const float level = spec.line_level + level_jitter(rng);
  const double radius = spec.line_thickness / 2.0;
  const int reach = static_cast<int>(std::ceil(radius));
  const double span = n * std::numbers::sqrt2;

  for (double t = -span; t <= span; t += 0.5) {
    const double px = cx + t * dx;
    const double py = cy + t * dy;
    for (int oy = -reach; oy <= reach; ++oy) {
      for (int ox = -reach; ox <= reach; ++ox) {
        if (ox * ox + oy * oy > radius * radius + 0.25) continue;
        const int x = static_cast<int>(std::lround(px)) + ox;
        const int y = static_cast<int>(std::lround(py)) + oy;
        if (x < 0 || x >= n || y < 0 || y >= n) continue;
        const size_t at = static_cast<size_t>(y) * n + x;
        out.pixels[at] = clamp_u8(level + line_noise(rng));
        out.line_mask[at] = 1;
      }
    }
  }
  return out;
}

SyntheticSet write_synthetic_set(const std::filesystem::path& root,
                                 const SyntheticSpec& spec) {
  validate_spec(spec);
  std::filesystem::create_directories(root / "images");

  std::ofstream index(root / kIndexFileName);
  if (!index) {
    throw std::runtime_error("synthetic: cannot write index under '" +
                             root.string() + "'");
  }
  const std::filesystem::path labels_path = root / "crack_labels.txt";
  std::ofstream labels(labels_path);
  if (!labels) {
    throw std::runtime_error("synthetic: cannot write labels file '" +
                             labels_path.string() + "'");
  }
  labels << "path crack_label\n";

  SyntheticSet set;
  set.root = root;
  set.labels_file = labels_path;

  std::mt19937_64 rng(spec.seed);
  const int n = spec.image_size;
  for (int i = 0; i < spec.count; ++i) {
    const CrackLabel label =
        i % 2 == 0 ? CrackLabel::kCrack : CrackLabel::kNonCrack;
    // Alternate the cell tag within each class so stratification has both.
    const CellType cell = (i / 2) % 2 == 0 ? CellType::kMono : CellType::kPoly;
    const SyntheticImage img = make_synthetic_image(spec, label, rng);

    char name[32];
    std::snprintf(name, sizeof(name), "images/synth%04d.png", i);
    const std::string path = name;

    const cv::Mat mat(n, n, CV_8UC1, const_cast<uint8_t*>(img.pixels.data()));
    if (!cv::imwrite((root / path).string(), mat)) {
      throw std::runtime_error("synthetic: failed to write '" +
                               (root / path).string() + "'");
    }

    index << path << ' ' << (label == CrackLabel::kCrack ? "1.0" : "0.0") << ' '
          << to_string(cell) << '\n';
    labels << path << ' ' << to_string(label) << '\n';
    set.line_masks[path] = label == CrackLabel::kCrack
                               ? img.line_mask
                               : std::vector<uint8_t>{};
  }
  index.close();
  labels.close();

  // Route the freshly written files through the standard loader so the
  // returned samples carry exactly what consumers will see.
  const Dataset dataset =
      load_dataset(root, labels_path, {LabelPolicy::kStrict, true});
  set.samples = dataset.samples;
  log::info("synthetic: wrote " + std::to_string(spec.count) + " images (" +
            std::to_string(n) + "x" + std::to_string(n) + ") under '" +
            root.string() + "'");
  return set;
}

}  // namespace crackseg
