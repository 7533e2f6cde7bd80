// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "crackseg/logging.hpp"

namespace crackseg {

namespace {

constexpr uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr uint64_t kFnvPrime = 1099511628211ULL;

// The four discrete defect probabilities published with the dataset.
constexpr std::array<double, 4> kProbabilityLevels{0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};

std::string location(const std::filesystem::path& file, int line_no) {
  return "'" + file.string() + "' line " + std::to_string(line_no);
}

bool blank_or_comment(const std::string& line) {
  const size_t first = line.find_first_not_of(" \t\r\n");
  return first == std::string::npos || line[first] == '#';
}

std::optional<CrackLabel> parse_crack_label(const std::string& text) {
  if (text == "crack") return CrackLabel::kCrack;
  if (text == "non-crack") return CrackLabel::kNonCrack;
  return std::nullopt;
}

uint64_t mix_epoch(uint64_t seed, int epoch) {
  // splitmix64 step over (seed, epoch) so neighbouring epochs decorrelate
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(epoch) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

const char* to_string(CellType type) {
  return type == CellType::kMono ? "mono" : "poly";
}

std::optional<CellType> parse_cell_type(const std::string& text) {
  if (text == "mono") return CellType::kMono;
  if (text == "poly") return CellType::kPoly;
  return std::nullopt;
}

const char* to_string(LabelPolicy policy) {
  return policy == LabelPolicy::kStrict ? "strict" : "proxy";
}

std::optional<LabelPolicy> parse_label_policy(const std::string& text) {
  if (text == "strict") return LabelPolicy::kStrict;
  if (text == "proxy") return LabelPolicy::kProxy;
  return std::nullopt;
}

int Dataset::count(CrackLabel label) const {
  return static_cast<int>(std::count_if(
      samples.begin(), samples.end(),
      [label](const ImageSample& s) { return s.crack_label == label; }));
}

int Dataset::count(CellType type) const {
  return static_cast<int>(std::count_if(
      samples.begin(), samples.end(),
      [type](const ImageSample& s) { return s.cell_type == type; }));
}

Dataset load_dataset(const std::filesystem::path& root,
                     const std::filesystem::path& labels_file,
                     const LoadOptions& options) {
  const std::filesystem::path index_path = root / kIndexFileName;
  std::ifstream index(index_path);
  if (!index) {
    throw std::runtime_error("dataset index '" + index_path.string() +
                             "' not found or unreadable");
  }

  Dataset dataset;
  dataset.root = root;
  dataset.index_checksum = fnv1a64_file(index_path);

  std::unordered_set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(index, line)) {
    ++line_no;
    if (blank_or_comment(line)) continue;
    std::istringstream row(line);
    std::string path, prob_text, cell_text, extra;
    if (!(row >> path >> prob_text >> cell_text) || (row >> extra)) {
      throw std::runtime_error("dataset index " + location(index_path, line_no) +
                               ": expected 'path defect_probability cell_type'");
    }

    double prob = 0.0;
    try {
      size_t used = 0;
      prob = std::stod(prob_text, &used);
      if (used != prob_text.size()) throw std::invalid_argument(prob_text);
    } catch (const std::exception&) {
      throw std::runtime_error("dataset index " + location(index_path, line_no) +
                               ": unparsable defect probability '" + prob_text +
                               "'");
    }
    const auto level = std::find_if(
        kProbabilityLevels.begin(), kProbabilityLevels.end(),
        [prob](double v) { return std::abs(prob - v) <= 1e-3; });
    if (level == kProbabilityLevels.end()) {
      throw std::runtime_error("dataset index " + location(index_path, line_no) +
                               ": defect probability " + prob_text +
                               " is not one of the dataset's levels {0, 1/3, "
                               "2/3, 1}");
    }

    const auto cell = parse_cell_type(cell_text);
    if (!cell) {
      throw std::runtime_error("dataset index " + location(index_path, line_no) +
                               ": unknown cell type '" + cell_text + "'");
    }
    if (!seen.insert(path).second) {
      throw std::runtime_error("dataset index " + location(index_path, line_no) +
                               ": image '" + path + "' listed twice");
    }
    if (options.verify_images_exist && !std::filesystem::exists(root / path)) {
      throw std::runtime_error("dataset index " + location(index_path, line_no) +
                               ": image file '" + (root / path).string() +
                               "' is missing");
    }

    ImageSample sample;
    sample.path = path;
    sample.defect_probability = static_cast<float>(*level);
    sample.cell_type = *cell;
    dataset.samples.push_back(std::move(sample));
  }
  if (dataset.samples.empty()) {
    throw std::runtime_error("dataset index '" + index_path.string() +
                             "' lists no images");
  }

  // Crack labels: explicit file first, then the policy for the remainder.
  std::unordered_map<std::string, CrackLabel> labels;
  if (!labels_file.empty()) {
    std::ifstream in(labels_file);
    if (!in) {
      throw std::runtime_error("labels file '" + labels_file.string() +
                               "' not found or unreadable");
    }
    dataset.labels_checksum = fnv1a64_file(labels_file);
    int labels_line = 0;
    int unknown_paths = 0;
    while (std::getline(in, line)) {
      ++labels_line;
      if (blank_or_comment(line)) continue;
      std::istringstream row(line);
      std::string path, label_text;
      if (!(row >> path >> label_text)) {
        throw std::runtime_error("labels file " +
                                 location(labels_file, labels_line) +
                                 ": expected 'path crack_label'");
      }
      const auto label = parse_crack_label(label_text);
      if (!label) {
        // The format carries one header line; only tolerate it up front.
        if (labels_line == 1) continue;
        throw std::runtime_error("labels file " +
                                 location(labels_file, labels_line) +
                                 ": unknown crack label '" + label_text + "'");
      }
      if (!seen.count(path)) {
        ++unknown_paths;
        continue;
      }
      labels[path] = *label;
    }
    if (unknown_paths > 0) {
      log::warn("labels file '" + labels_file.string() + "': " +
                std::to_string(unknown_paths) +
                " entries do not match any indexed image");
    }
  }

  int proxied = 0;
  for (ImageSample& sample : dataset.samples) {
    const auto it = labels.find(sample.path);
    if (it != labels.end()) {
      sample.crack_label = it->second;
      sample.label_from_proxy = false;
      continue;
    }
    if (options.policy == LabelPolicy::kStrict) {
      throw std::runtime_error("dataset: image '" + sample.path +
                               "' has no crack label and the policy is "
                               "strict; provide a labels file or use the "
                               "proxy policy");
    }
    sample.crack_label = sample.defect_probability >= 0.5f
                             ? CrackLabel::kCrack
                             : CrackLabel::kNonCrack;
    sample.label_from_proxy = true;
    ++proxied;
  }

  std::ostringstream summary;
  summary << "dataset: " << dataset.samples.size() << " samples ("
          << dataset.count(CrackLabel::kCrack) << " crack / "
          << dataset.count(CrackLabel::kNonCrack) << " non-crack; "
          << dataset.count(CellType::kMono) << " mono / "
          << dataset.count(CellType::kPoly) << " poly) from '" << root.string()
          << "'";
  if (proxied > 0) {
    summary << "; " << proxied
            << " labels derived from defect probability (proxy policy)";
  }
  log::info(summary.str());
  return dataset;
}

Tensor preprocess_image(const std::filesystem::path& image_path,
                        int expected_size) {
  if (expected_size < 1) {
    throw std::invalid_argument("preprocess: expected_size must be positive");
  }
  const cv::Mat img =
      cv::imread(image_path.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) {
    throw std::runtime_error("preprocess: failed to read image '" +
                             image_path.string() + "'");
  }
  if (img.rows != expected_size || img.cols != expected_size) {
    throw std::runtime_error(
        "preprocess: image '" + image_path.string() + "' is " +
        std::to_string(img.cols) + "x" + std::to_string(img.rows) +
        ", expected " + std::to_string(expected_size) + "x" +
        std::to_string(expected_size) + " (no silent resizing)");
  }

  const int s = expected_size;
  Tensor out({3, s, s});
  const size_t plane = static_cast<size_t>(s) * s;
  for (int y = 0; y < s; ++y) {
    const uint8_t* row = img.ptr<uint8_t>(y);
    for (int x = 0; x < s; ++x) {
      const float value = static_cast<float>(row[x]) / 255.0f;
      const size_t at = static_cast<size_t>(y) * s + x;
      for (int c = 0; c < 3; ++c) {
        out.data()[c * plane + at] = (value - kChannelMean[c]) / kChannelStd[c];
      }
    }
  }
  return out;
}

Tensor preprocess(const std::filesystem::path& root, const ImageSample& sample,
                  int expected_size) {
  return preprocess_image(root / sample.path, expected_size);
}

Tensor make_batch(const std::vector<Tensor>& images) {
  if (images.empty()) {
    throw std::invalid_argument("make_batch: no images");
  }
  const Tensor& first = images.front();
  if (first.ndim() != 3) {
    throw std::invalid_argument("make_batch: expected [C, H, W] images, got " +
                                first.shape_str());
  }
  for (const Tensor& img : images) {
    if (!img.same_shape(first)) {
      throw std::invalid_argument("make_batch: mixed shapes " +
                                  first.shape_str() + " and " + img.shape_str());
    }
  }
  Tensor batch({static_cast<int>(images.size()), first.dim(0), first.dim(1),
                first.dim(2)});
  const size_t stride = static_cast<size_t>(first.numel());
  for (size_t i = 0; i < images.size(); ++i) {
    std::copy(images[i].data(), images[i].data() + stride,
              batch.data() + i * stride);
  }
  return batch;
}

Tensor apply_dihedral(const Tensor& chw, int transform) {
  if (chw.ndim() != 3 || chw.dim(1) != chw.dim(2)) {
    throw std::invalid_argument("apply_dihedral: expected square [C, H, H], got " +
                                chw.shape_str());
  }
  if (transform < 0 || transform > 7) {
    throw std::invalid_argument("apply_dihedral: transform " +
                                std::to_string(transform) + " out of range 0..7");
  }
  if (transform == 0) return chw;

  const int c = chw.dim(0);
  const int n = chw.dim(1);
  const int rot = transform % 4;
  const bool flip = transform >= 4;
  Tensor out(chw.shape());
  const size_t plane = static_cast<size_t>(n) * n;
  for (int ch = 0; ch < c; ++ch) {
    const float* src = chw.data() + ch * plane;
    float* dst = out.data() + ch * plane;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const int jj = flip ? n - 1 - j : j;  // horizontal flip after rotation
        int sy = i, sx = jj;
        switch (rot) {  // counter-clockwise rotation by rot * 90 degrees
          case 1: sy = jj; sx = n - 1 - i; break;
          case 2: sy = n - 1 - i; sx = n - 1 - jj; break;
          case 3: sy = n - 1 - jj; sx = i; break;
          default: break;
        }
        dst[static_cast<size_t>(i) * n + j] = src[static_cast<size_t>(sy) * n + sx];
      }
    }
  }
  return out;
}

void SplitRatios::validate() const {
  if (!(train > 0.0) || !(val > 0.0) || !(test > 0.0)) {
    throw std::invalid_argument("split ratios must all be positive");
  }
  const double sum = train + val + test;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios sum to " + std::to_string(sum) +
                                ", expected 1");
  }
}

namespace {

// Largest-remainder apportionment of `total` items across the three
// splits; ties go to the earlier split (train, val, test).
std::array<size_t, 3> apportion(size_t total, const SplitRatios& ratios) {
  const std::array<double, 3> weight{ratios.train, ratios.val, ratios.test};
  std::array<size_t, 3> take{};
  std::array<double, 3> remainder{};
  size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double quota = static_cast<double>(total) * weight[s];
    take[s] = static_cast<size_t>(quota);
    remainder[s] = quota - static_cast<double>(take[s]);
    assigned += take[s];
  }
  while (assigned < total) {
    int best = 0;
    for (int s = 1; s < 3; ++s) {
      if (remainder[s] > remainder[best]) best = s;
    }
    ++take[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  return take;
}

int split_count(const std::vector<ImageSample>& part, CrackLabel label) {
  return static_cast<int>(std::count_if(
      part.begin(), part.end(),
      [label](const ImageSample& s) { return s.crack_label == label; }));
}

// Moves samples of `label` from the richest split into any split missing
// that class. Tiny strata can leave a split without one class after
// per-stratum apportionment; the repair keeps disjointness and coverage.
void ensure_class_presence(DatasetSplit& split) {
  std::array<std::vector<ImageSample>*, 3> parts{&split.train, &split.val,
                                                 &split.test};
  for (const CrackLabel label : {CrackLabel::kCrack, CrackLabel::kNonCrack}) {
    for (auto* needy : parts) {
      while (split_count(*needy, label) == 0) {
        std::vector<ImageSample>* donor = nullptr;
        for (auto* candidate : parts) {
          if (candidate == needy) continue;
          if (donor == nullptr ||
              split_count(*candidate, label) > split_count(*donor, label)) {
            donor = candidate;
          }
        }
        if (donor == nullptr || split_count(*donor, label) <= 1) {
          throw std::runtime_error(
              std::string("stratified split: cannot place class '") +
              to_string(label) +
              "' into every split; adjust the split ratios or provide more "
              "samples");
        }
        const auto it = std::find_if(
            donor->rbegin(), donor->rend(),
            [label](const ImageSample& s) { return s.crack_label == label; });
        needy->push_back(*it);
        donor->erase(std::next(it).base());
      }
    }
  }
}

}  // namespace

DatasetSplit stratified_split(const std::vector<ImageSample>& samples,
                              const SplitRatios& ratios, uint64_t seed) {
  ratios.validate();
  for (const CrackLabel label : {CrackLabel::kCrack, CrackLabel::kNonCrack}) {
    const auto total = std::count_if(
        samples.begin(), samples.end(),
        [label](const ImageSample& s) { return s.crack_label == label; });
    if (total < 3) {
      throw std::runtime_error(
          std::string("stratified split: class '") + to_string(label) +
          "' has only " + std::to_string(total) +
          " samples, too few for three splits; adjust the split ratios or the "
          "dataset");
    }
  }

  // Strata in fixed key order so the single generator stays reproducible.
  std::map<int, std::vector<size_t>> strata;
  for (size_t i = 0; i < samples.size(); ++i) {
    const int key = static_cast<int>(samples[i].crack_label) * 2 +
                    static_cast<int>(samples[i].cell_type);
    strata[key].push_back(i);
  }

  std::mt19937_64 rng(seed);
  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  for (auto& [key, indices] : strata) {
    std::shuffle(indices.begin(), indices.end(), rng);
    const auto take = apportion(indices.size(), ratios);
    size_t at = 0;
    for (size_t i = 0; i < take[0]; ++i) split.train.push_back(samples[indices[at++]]);
    for (size_t i = 0; i < take[1]; ++i) split.val.push_back(samples[indices[at++]]);
    for (size_t i = 0; i < take[2]; ++i) split.test.push_back(samples[indices[at++]]);
  }
  ensure_class_presence(split);
  return split;
}

DatasetSplit stratified_group_split(
    const std::vector<ImageSample>& samples, const SplitRatios& ratios,
    uint64_t seed, const std::map<std::string, std::string>& group_of_path) {
  ratios.validate();
  if (samples.empty()) {
    throw std::invalid_argument("stratified split: no samples");
  }

  // Whole groups move together; unmapped paths form singleton groups.
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto it = group_of_path.find(samples[i].path);
    const std::string id =
        it != group_of_path.end() ? "g:" + it->second : "s:" + samples[i].path;
    groups[id].push_back(i);
  }

  std::vector<const std::vector<size_t>*> order;
  order.reserve(groups.size());
  for (const auto& [id, members] : groups) order.push_back(&members);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  const std::array<double, 3> weight{ratios.train, ratios.val, ratios.test};
  std::array<std::vector<ImageSample>*, 3> parts{&split.train, &split.val,
                                                 &split.test};
  const double total = static_cast<double>(samples.size());
  for (const auto* members : order) {
    // Each group lands in the split furthest below its target share.
    int best = 0;
    double best_deficit = -1e300;
    for (int s = 0; s < 3; ++s) {
      const double deficit =
          weight[s] * total - static_cast<double>(parts[s]->size());
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    for (const size_t i : *members) parts[best]->push_back(samples[i]);
  }

  for (const CrackLabel label : {CrackLabel::kCrack, CrackLabel::kNonCrack}) {
    for (const auto* part : parts) {
      if (split_count(*part, label) == 0) {
        throw std::runtime_error(
            std::string("group split: class '") + to_string(label) +
            "' is absent from one split; group boundaries are too coarse for "
            "these ratios, use the by-cell split or different ratios");
      }
    }
  }
  return split;
}

std::map<std::string, std::string> load_group_map(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("group map '" + path.string() +
                             "' not found or unreadable");
  }
  std::map<std::string, std::string> map;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank_or_comment(line)) continue;
    std::istringstream row(line);
    std::string sample_path, group;
    if (!(row >> sample_path >> group)) {
      throw std::runtime_error("group map " + location(path, line_no) +
                               ": expected 'path group_id'");
    }
    map[sample_path] = group;
  }
  return map;
}

uint64_t split_checksum(const DatasetSplit& split) {
  uint64_t hash = kFnvOffset;
  auto feed = [&hash](const std::string& text) {
    for (const unsigned char byte : text) {
      hash ^= byte;
      hash *= kFnvPrime;
    }
    hash ^= 0xff;  // separator so field boundaries matter
    hash *= kFnvPrime;
  };
  const std::array<std::pair<const char*, const std::vector<ImageSample>*>, 3>
      parts{{{"train", &split.train}, {"val", &split.val}, {"test", &split.test}}};
  for (const auto& [name, part] : parts) {
    feed(name);
    for (const ImageSample& sample : *part) {
      feed(sample.path);
      feed(to_string(sample.crack_label));
    }
  }
  return hash;
}

TrainingStream::TrainingStream(std::vector<ImageSample> samples, int batch_size,
                               bool balance, bool augment, uint64_t seed)
    : samples_(std::move(samples)),
      batch_size_(batch_size),
      balance_(balance),
      augment_(augment),
      seed_(seed) {
  if (batch_size_ < 1) {
    throw std::invalid_argument("training stream: batch_size must be >= 1, got " +
                                std::to_string(batch_size_));
  }
  if (samples_.empty()) {
    throw std::invalid_argument("training stream: empty training split");
  }

  base_roster_.resize(samples_.size());
  std::iota(base_roster_.begin(), base_roster_.end(), size_t{0});
  epoch_size_ = base_roster_.size();

  if (balance_) {
    std::vector<size_t> crack, non_crack;
    for (size_t i = 0; i < samples_.size(); ++i) {
      (samples_[i].crack_label == CrackLabel::kCrack ? crack : non_crack)
          .push_back(i);
    }
    if (crack.empty() || non_crack.empty()) {
      throw std::invalid_argument(
          "training stream: cannot balance classes, split lacks '" +
          std::string(crack.empty() ? "crack" : "non-crack") + "' samples");
    }
    minority_pool_ = crack.size() <= non_crack.size() ? crack : non_crack;
    extra_draws_ = crack.size() <= non_crack.size()
                       ? non_crack.size() - crack.size()
                       : crack.size() - non_crack.size();
    epoch_size_ += extra_draws_;
  }
}

std::vector<std::vector<TrainingStream::Item>> TrainingStream::epoch_batches(
    int epoch) const {
  std::mt19937_64 rng(mix_epoch(seed_, epoch));

  std::vector<size_t> roster = base_roster_;
  if (extra_draws_ > 0) {
    std::uniform_int_distribution<size_t> pick(0, minority_pool_.size() - 1);
    for (size_t i = 0; i < extra_draws_; ++i) {
      roster.push_back(minority_pool_[pick(rng)]);
    }
  }
  std::shuffle(roster.begin(), roster.end(), rng);

  std::vector<std::vector<Item>> batches;
  batches.reserve((roster.size() + batch_size_ - 1) / batch_size_);
  std::uniform_int_distribution<int> transform(0, 7);
  for (size_t at = 0; at < roster.size(); at += batch_size_) {
    const size_t end = std::min(roster.size(), at + batch_size_);
    std::vector<Item> batch;
    batch.reserve(end - at);
    for (size_t i = at; i < end; ++i) {
      batch.push_back({roster[i], augment_ ? transform(rng) : 0});
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

TrainingStream make_training_stream(const std::vector<ImageSample>& samples,
                                    int batch_size, bool balance, bool augment,
                                    uint64_t seed) {
  return TrainingStream(samples, batch_size, balance, augment, seed);
}

uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  uint64_t hash = kFnvOffset;
  for (const unsigned char byte : bytes) {
    hash ^= byte;
    hash *= kFnvPrime;
  }
  return hash;
}

uint64_t fnv1a64_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("checksum: cannot read '" + path.string() + "'");
  }
  uint64_t hash = kFnvOffset;
  char buffer[1 << 16];
  while (in.read(buffer, sizeof(buffer)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      hash ^= static_cast<unsigned char>(buffer[i]);
      hash *= kFnvPrime;
    }
  }
  return hash;
}

}  // namespace crackseg
