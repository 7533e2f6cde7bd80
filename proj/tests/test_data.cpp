// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "crackseg/data.hpp"
#include "crackseg/segment.hpp"
#include "crackseg/synthetic.hpp"
#include "doctest.h"
#include "support.hpp"

using crackseg::apply_dihedral;
using crackseg::CellType;
using crackseg::CrackLabel;
using crackseg::Dataset;
using crackseg::DatasetSplit;
using crackseg::fnv1a64;
using crackseg::fnv1a64_file;
using crackseg::ImageSample;
using crackseg::kChannelMean;
using crackseg::kChannelStd;
using crackseg::load_dataset;
using crackseg::load_group_map;
using crackseg::LoadOptions;
using crackseg::LabelPolicy;
using crackseg::make_batch;
using crackseg::preprocess_image;
using crackseg::SegmentationMask;
using crackseg::split_checksum;
using crackseg::SplitRatios;
using crackseg::stratified_group_split;
using crackseg::stratified_split;
using crackseg::SyntheticSpec;
using crackseg::Tensor;
using crackseg::TrainingStream;
using crackseg::write_mask_png;
using crackseg::write_synthetic_set;
using testsupport::capture_error;
using testsupport::contains;
using testsupport::TempDir;

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

LoadOptions index_only(LabelPolicy policy) {
  LoadOptions options;
  options.policy = policy;
  options.verify_images_exist = false;
  return options;
}

/// In-memory sample list for split tests; crack images carry probability
/// 1, non-crack 0, so proxy and explicit labels agree.
std::vector<ImageSample> make_samples(int crack_mono, int crack_poly,
                                      int non_mono, int non_poly) {
  std::vector<ImageSample> samples;
  int serial = 0;
  auto add = [&](int count, CrackLabel label, CellType type) {
    for (int i = 0; i < count; ++i) {
      ImageSample s;
      s.path = "img" + std::to_string(serial++) + ".png";
      s.crack_label = label;
      s.cell_type = type;
      s.defect_probability = label == CrackLabel::kCrack ? 1.0f : 0.0f;
      samples.push_back(std::move(s));
    }
  };
  add(crack_mono, CrackLabel::kCrack, CellType::kMono);
  add(crack_poly, CrackLabel::kCrack, CellType::kPoly);
  add(non_mono, CrackLabel::kNonCrack, CellType::kMono);
  add(non_poly, CrackLabel::kNonCrack, CellType::kPoly);
  return samples;
}

std::set<std::string> paths_of(const std::vector<ImageSample>& samples) {
  std::set<std::string> out;
  for (const auto& s : samples) out.insert(s.path);
  return out;
}

bool has_label(const std::vector<ImageSample>& samples, CrackLabel label) {
  return std::any_of(samples.begin(), samples.end(), [label](const ImageSample& s) {
    return s.crack_label == label;
  });
}

void check_partition(const std::vector<ImageSample>& all,
                     const DatasetSplit& split) {
  const auto train = paths_of(split.train);
  const auto val = paths_of(split.val);
  const auto test = paths_of(split.test);
  CHECK(split.train.size() + split.val.size() + split.test.size() == all.size());

  std::set<std::string> seen;
  for (const auto& part : {train, val, test}) {
    for (const auto& p : part) CHECK(seen.insert(p).second);
  }
  CHECK(seen == paths_of(all));
}

/// Writes a constant single-channel PNG by abusing the lossless mask
/// writer: grid value 1 encodes pixel 255, value 0 pixel 0.
void write_constant_png(const std::filesystem::path& path, int size,
                        uint8_t grid_value) {
  SegmentationMask mask;
  mask.height = size;
  mask.width = size;
  mask.grid.assign(static_cast<size_t>(size) * size, grid_value);
  write_mask_png(mask, path);
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("the index parses path probability and cell type rows") {
  TempDir tmp("index");
  write_text(tmp.path() / "labels.csv",
             "# elpv style index\n"
             "\n"
             "cell_a.png 0.0 mono\n"
             "cell_b.png 0.3333 mono\n"
             "cell_c.png 0.6667 poly\n"
             "cell_d.png 1.0 poly\n");

  const Dataset ds = load_dataset(tmp.path(), {}, index_only(LabelPolicy::kProxy));
  REQUIRE(ds.samples.size() == 4);
  CHECK(ds.index_checksum != 0);
  CHECK(ds.labels_checksum == 0);

  CHECK(ds.samples[0].defect_probability == doctest::Approx(0.0));
  CHECK(ds.samples[1].defect_probability == doctest::Approx(1.0 / 3.0));
  CHECK(ds.samples[2].defect_probability == doctest::Approx(2.0 / 3.0));
  CHECK(ds.samples[3].defect_probability == doctest::Approx(1.0));

  CHECK(ds.samples[1].cell_type == CellType::kMono);
  CHECK(ds.samples[2].cell_type == CellType::kPoly);

  // Proxy policy: crack iff the defect probability reaches one half.
  CHECK(ds.samples[0].crack_label == CrackLabel::kNonCrack);
  CHECK(ds.samples[1].crack_label == CrackLabel::kNonCrack);
  CHECK(ds.samples[2].crack_label == CrackLabel::kCrack);
  CHECK(ds.samples[3].crack_label == CrackLabel::kCrack);
  for (const auto& s : ds.samples) CHECK(s.label_from_proxy);

  CHECK(ds.count(CrackLabel::kCrack) == 2);
  CHECK(ds.count(CellType::kPoly) == 2);
}

TEST_CASE("malformed index rows are rejected with their location") {
  TempDir tmp("index-bad");
  const auto root = tmp.path();
  const auto options = index_only(LabelPolicy::kProxy);

  write_text(root / "labels.csv", "a.png 0.0 mono extra_column\n");
  std::string err = capture_error([&] { load_dataset(root, {}, options); });
  CHECK(contains(err, "expected 'path defect_probability cell_type'"));
  CHECK(contains(err, "line 1"));

  write_text(root / "labels.csv", "a.png 0.0 mono\nb.png 0.5 mono\n");
  err = capture_error([&] { load_dataset(root, {}, options); });
  CHECK(contains(err, "not one of the dataset's levels"));
  CHECK(contains(err, "line 2"));

  write_text(root / "labels.csv", "a.png zero mono\n");
  CHECK(contains(capture_error([&] { load_dataset(root, {}, options); }),
                 "unparsable defect probability"));

  write_text(root / "labels.csv", "a.png 0.0 amorphous\n");
  CHECK(contains(capture_error([&] { load_dataset(root, {}, options); }),
                 "unknown cell type"));

  write_text(root / "labels.csv", "a.png 0.0 mono\na.png 1.0 mono\n");
  CHECK(contains(capture_error([&] { load_dataset(root, {}, options); }),
                 "listed twice"));

  write_text(root / "labels.csv", "# only comments\n");
  CHECK(contains(capture_error([&] { load_dataset(root, {}, options); }),
                 "lists no images"));

  std::filesystem::remove(root / "labels.csv");
  CHECK(contains(capture_error([&] { load_dataset(root, {}, options); }),
                 "not found"));
}

TEST_CASE("strict policy requires every image to carry a label") {
  TempDir tmp("strict");
  write_text(tmp.path() / "labels.csv",
             "first.png 1.0 mono\n"
             "second.png 0.0 mono\n");

  const std::string err = capture_error(
      [&] { load_dataset(tmp.path(), {}, index_only(LabelPolicy::kStrict)); });
  CHECK(contains(err, "first.png"));
  CHECK(contains(err, "policy is strict"));

  // Covering only part of the index still fails, naming an uncovered image.
  write_text(tmp.path() / "crack_labels.tsv",
             "path crack_label\n"
             "first.png crack\n");
  CHECK(contains(capture_error([&] {
                   load_dataset(tmp.path(), tmp.path() / "crack_labels.tsv",
                                index_only(LabelPolicy::kStrict));
                 }),
                 "second.png"));
}

TEST_CASE("the labels file overrides the proxy and tolerates a header") {
  TempDir tmp("labels");
  write_text(tmp.path() / "labels.csv",
             "a.png 1.0 mono\n"
             "b.png 0.0 mono\n");
  write_text(tmp.path() / "crack_labels.tsv",
             "path crack_label\n"
             "a.png non-crack\n"
             "b.png crack\n"
             "ghost.png crack\n");

  const Dataset ds = load_dataset(tmp.path(), tmp.path() / "crack_labels.tsv",
                                  index_only(LabelPolicy::kStrict));
  REQUIRE(ds.samples.size() == 2);
  CHECK(ds.labels_checksum != 0);
  // Explicit labels win over what the probabilities would suggest.
  CHECK(ds.samples[0].crack_label == CrackLabel::kNonCrack);
  CHECK(ds.samples[1].crack_label == CrackLabel::kCrack);
  for (const auto& s : ds.samples) CHECK_FALSE(s.label_from_proxy);

  write_text(tmp.path() / "crack_labels.tsv",
             "path crack_label\n"
             "a.png non-crack\n"
             "b.png cracked\n");
  CHECK(contains(capture_error([&] {
                   load_dataset(tmp.path(), tmp.path() / "crack_labels.tsv",
                                index_only(LabelPolicy::kStrict));
                 }),
                 "unknown crack label"));
}

TEST_CASE("listed image files must exist unless verification is off") {
  TempDir tmp("verify");
  write_text(tmp.path() / "labels.csv", "phantom.png 0.0 mono\n");

  LoadOptions verifying;
  verifying.policy = LabelPolicy::kProxy;
  CHECK(contains(
      capture_error([&] { load_dataset(tmp.path(), {}, verifying); }),
      "is missing"));
  CHECK_NOTHROW(load_dataset(tmp.path(), {}, index_only(LabelPolicy::kProxy)));
}

TEST_CASE("preprocessing normalizes with the pretraining statistics") {
  TempDir tmp("preprocess");
  const auto white = tmp.path() / "white.png";
  const auto black = tmp.path() / "black.png";
  write_constant_png(white, 64, 1);
  write_constant_png(black, 64, 0);

  const Tensor lit = preprocess_image(white, 64);
  REQUIRE(lit.ndim() == 3);
  CHECK(lit.dim(0) == 3);
  CHECK(lit.dim(1) == 64);
  CHECK(lit.dim(2) == 64);

  const Tensor dark = preprocess_image(black, 64);
  const int plane = 64 * 64;
  for (int c = 0; c < 3; ++c) {
    const float want_lit = (1.0f - kChannelMean[c]) / kChannelStd[c];
    const float want_dark = (0.0f - kChannelMean[c]) / kChannelStd[c];
    for (int i = 0; i < plane; ++i) {
      CHECK(lit.data()[c * plane + i] == doctest::Approx(want_lit).epsilon(1e-6));
      CHECK(dark.data()[c * plane + i] ==
            doctest::Approx(want_dark).epsilon(1e-6));
    }
  }
}

TEST_CASE("preprocessing rejects images of the wrong extent") {
  TempDir tmp("preprocess-size");
  const auto small = tmp.path() / "small.png";
  write_constant_png(small, 64, 1);

  const std::string err =
      capture_error([&] { preprocess_image(small, 300); });
  CHECK(contains(err, "64"));
  CHECK(contains(err, "300"));
}

TEST_CASE("make_batch stacks CHW images in order") {
  Tensor a({3, 2, 2}, 1.0f);
  Tensor b({3, 2, 2}, 2.0f);
  const Tensor batch = make_batch({a, b});
  REQUIRE(batch.ndim() == 4);
  CHECK(batch.dim(0) == 2);
  CHECK(batch.dim(1) == 3);
  for (int i = 0; i < 12; ++i) {
    CHECK(batch.data()[i] == 1.0f);
    CHECK(batch.data()[12 + i] == 2.0f);
  }
}

TEST_CASE("the dihedral transforms form the eight square symmetries") {
  Tensor base({1, 2, 2});
  for (int i = 0; i < 4; ++i) base.data()[i] = static_cast<float>(i + 1);

  const auto flat = [](const Tensor& t) {
    return std::vector<float>(t.data(), t.data() + t.numel());
  };

  CHECK(flat(apply_dihedral(base, 0)) == flat(base));

  // All eight transforms permute the pixels and stay distinct on an
  // asymmetric input.
  std::set<std::vector<float>> variants;
  for (int t = 0; t < 8; ++t) {
    const Tensor out = apply_dihedral(base, t);
    auto values = flat(out);
    variants.insert(values);
    std::sort(values.begin(), values.end());
    CHECK(values == std::vector<float>{1, 2, 3, 4});
  }
  CHECK(variants.size() == 8);

  // Rotating by 90 degrees twice matches the 180 degree transform.
  CHECK(flat(apply_dihedral(apply_dihedral(base, 1), 1)) ==
        flat(apply_dihedral(base, 2)));

  CHECK(contains(capture_error([&] { apply_dihedral(base, 8); }),
                 "out of range"));
  CHECK(contains(
      capture_error([&] { apply_dihedral(Tensor({1, 2, 3}), 1); }),
      "square"));
}

TEST_CASE("stratified splits are deterministic per seed") {
  const auto samples = make_samples(11, 10, 11, 10);
  const SplitRatios ratios{};

  const DatasetSplit a = stratified_split(samples, ratios, 5);
  const DatasetSplit b = stratified_split(samples, ratios, 5);
  CHECK(paths_of(a.train) == paths_of(b.train));
  CHECK(paths_of(a.val) == paths_of(b.val));
  CHECK(paths_of(a.test) == paths_of(b.test));
  CHECK(split_checksum(a) == split_checksum(b));

  const DatasetSplit c = stratified_split(samples, ratios, 6);
  CHECK(paths_of(a.train) != paths_of(c.train));
  CHECK(split_checksum(a) != split_checksum(c));
}

TEST_CASE("a balanced hundred sample set splits eighty ten ten") {
  const auto samples = make_samples(50, 0, 50, 0);
  SplitRatios ratios;
  ratios.train = 0.8;
  ratios.val = 0.1;
  ratios.test = 0.1;

  const DatasetSplit split = stratified_split(samples, ratios, 0);
  CHECK(split.train.size() == 80);
  CHECK(split.val.size() == 10);
  CHECK(split.test.size() == 10);
}

TEST_CASE("tiny classes are rejected with a sample count hint") {
  const auto samples = make_samples(2, 0, 10, 0);
  const std::string err = capture_error(
      [&] { stratified_split(samples, SplitRatios{}, 0); });
  CHECK(contains(err, "2 samples"));
}

TEST_CASE("fifty seeds never leak drop or unbalance a split") {
  const auto samples = make_samples(6, 5, 16, 15);
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const DatasetSplit split = stratified_split(samples, SplitRatios{}, seed);
    check_partition(samples, split);
    for (const auto* part : {&split.train, &split.val, &split.test}) {
      CHECK(has_label(*part, CrackLabel::kCrack));
      CHECK(has_label(*part, CrackLabel::kNonCrack));
    }
  }
}

TEST_CASE("group splits keep whole modules in one subset") {
  TempDir tmp("groups");
  // Ten modules of three cells, each holding one crack and two intact
  // cells, so every module assignment leaves both classes in every split.
  const auto pool = make_samples(10, 0, 20, 0);
  std::vector<ImageSample> samples;
  for (size_t m = 0; m < 10; ++m) {
    samples.push_back(pool[m]);
    samples.push_back(pool[10 + 2 * m]);
    samples.push_back(pool[10 + 2 * m + 1]);
  }
  std::map<std::string, std::string> groups;
  std::string map_text = "# path module\n";
  for (size_t i = 0; i < samples.size(); ++i) {
    const std::string group = "module" + std::to_string(i / 3);
    groups[samples[i].path] = group;
    map_text += samples[i].path + " " + group + "\n";
  }
  write_text(tmp.path() / "modules.tsv", map_text);
  CHECK(load_group_map(tmp.path() / "modules.tsv") == groups);

  const DatasetSplit split =
      stratified_group_split(samples, SplitRatios{}, 3, groups);
  check_partition(samples, split);

  std::map<std::string, std::set<int>> group_homes;
  auto note = [&](const std::vector<ImageSample>& part, int which) {
    for (const auto& s : part) group_homes[groups.at(s.path)].insert(which);
  };
  note(split.train, 0);
  note(split.val, 1);
  note(split.test, 2);
  for (const auto& [group, homes] : group_homes) {
    CHECK_MESSAGE(homes.size() == 1, group);
  }
}

TEST_CASE("the training stream oversamples the minority to even odds") {
  const auto samples = make_samples(4, 0, 16, 0);
  const TrainingStream stream(samples, 4, /*balance=*/true, /*augment=*/false, 3);
  CHECK(stream.epoch_size() == 32);

  for (int epoch = 1; epoch <= 5; ++epoch) {
    int crack = 0;
    int total = 0;
    std::map<size_t, int> draws;
    for (const auto& batch : stream.epoch_batches(epoch)) {
      for (const auto& item : batch) {
        ++draws[item.sample];
        ++total;
        if (stream.samples()[item.sample].crack_label == CrackLabel::kCrack) {
          ++crack;
        }
      }
    }
    CHECK(total == 32);
    const double freq = static_cast<double>(crack) / total;
    CHECK(std::abs(freq - 0.5) <= 0.05);

    // Every sample appears at least once; only minority samples repeat.
    CHECK(draws.size() == samples.size());
    for (const auto& [index, count] : draws) {
      if (count > 1) {
        CHECK(stream.samples()[index].crack_label == CrackLabel::kCrack);
      }
    }
  }
}

TEST_CASE("epoch schedules are deterministic and epoch dependent") {
  const auto samples = make_samples(5, 5, 5, 5);
  const TrainingStream a(samples, 4, false, true, 9);
  const TrainingStream b(samples, 4, false, true, 9);

  const auto order = [](const TrainingStream& s, int epoch) {
    std::vector<std::pair<size_t, int>> out;
    for (const auto& batch : s.epoch_batches(epoch)) {
      for (const auto& item : batch) out.emplace_back(item.sample, item.transform);
    }
    return out;
  };

  CHECK(order(a, 1) == order(b, 1));
  CHECK(order(a, 4) == order(b, 4));
  CHECK(order(a, 3) != order(a, 4));

  bool any_transform = false;
  for (const auto& [sample, transform] : order(a, 2)) {
    (void)sample;
    CHECK(transform >= 0);
    CHECK(transform < 8);
    any_transform = any_transform || transform != 0;
  }
  CHECK(any_transform);

  // With augmentation off the schedule is the bare sample order.
  const TrainingStream plain(samples, 4, false, false, 9);
  for (const auto& [sample, transform] : order(plain, 2)) {
    (void)sample;
    CHECK(transform == 0);
  }
}

TEST_CASE("batching divides the epoch roster with a short tail") {
  const auto samples = make_samples(4, 0, 16, 0);
  const TrainingStream stream(samples, 6, true, false, 1);
  const auto batches = stream.epoch_batches(1);
  REQUIRE(batches.size() == 6);
  for (size_t i = 0; i + 1 < batches.size(); ++i) CHECK(batches[i].size() == 6);
  CHECK(batches.back().size() == 2);
}

TEST_CASE("fnv1a64 matches the published test vectors") {
  const auto hash = [](const std::string& text) {
    return fnv1a64(std::span<const unsigned char>(
        reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  };
  CHECK(hash("") == 0xcbf29ce484222325ULL);
  CHECK(hash("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(hash("foobar") == 0x85944171f73967e8ULL);

  TempDir tmp("fnv");
  write_text(tmp.path() / "blob.txt", "foobar");
  CHECK(fnv1a64_file(tmp.path() / "blob.txt") == 0x85944171f73967e8ULL);
}

TEST_CASE("synthetic sets reload bit for bit under the strict policy") {
  TempDir tmp("synthetic");
  SyntheticSpec spec;
  spec.count = 12;
  spec.image_size = 32;
  spec.seed = 77;

  const auto set = write_synthetic_set(tmp.path() / "data", spec);
  REQUIRE(set.samples.size() == 12);

  // Line masks exist exactly for the crack images.
  int masked = 0;
  for (const auto& sample : set.samples) {
    const auto& mask = set.line_masks.at(sample.path);
    if (sample.crack_label == CrackLabel::kCrack) {
      CHECK_FALSE(mask.empty());
      ++masked;
    } else {
      CHECK(mask.empty());
    }
  }
  CHECK(masked == 6);

  const Dataset first = load_dataset(set.root, set.labels_file, {});
  const Dataset second = load_dataset(set.root, set.labels_file, {});
  CHECK(first.samples.size() == 12);
  CHECK(first.index_checksum == second.index_checksum);
  CHECK(first.labels_checksum == second.labels_checksum);
  CHECK(first.count(CrackLabel::kCrack) == 6);
}

}  // TEST_SUITE
