// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/archive.hpp"

#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace crackseg {

namespace {
constexpr char kMagic[8] = {'C', 'S', 'E', 'G', 'A', 'R', 'C', 'H'};
constexpr uint32_t kFormatVersion = 1;

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& why) {
  throw std::runtime_error("tensor archive '" + path.string() + "': " + why);
}
}  // namespace

TensorArchive::TensorArchive() : meta_(std::make_unique<nlohmann::json>(nlohmann::json::object())) {}
TensorArchive::~TensorArchive() = default;
TensorArchive::TensorArchive(TensorArchive&&) noexcept = default;
TensorArchive& TensorArchive::operator=(TensorArchive&&) noexcept = default;

void TensorArchive::add(const std::string& name, const std::vector<int>& shape,
                        std::span<const float> values) {
  if (index_.count(name)) {
    throw std::invalid_argument("tensor archive: duplicate entry '" + name + "'");
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor archive: shape/data mismatch for '" + name + "'");
  }
  index_[name] = entries_.size();
  entries_.push_back({name, shape, std::vector<float>(values.begin(), values.end())});
}

bool TensorArchive::has(const std::string& name) const { return index_.count(name) > 0; }

const ArchiveEntry* TensorArchive::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

nlohmann::json& TensorArchive::meta() { return *meta_; }
const nlohmann::json& TensorArchive::meta() const { return *meta_; }

void TensorArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = kFormatVersion;
  header["meta"] = *meta_;
  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& e : entries_) {
    const uint64_t nbytes = e.data.size() * sizeof(float);
    manifest.push_back({{"name", e.name},
                        {"shape", e.shape},
                        {"dtype", "f32"},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = std::move(manifest);
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out.write(kMagic, sizeof(kMagic));
  uint32_t version = kFormatVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& e : entries_) {
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(float)));
  }
  if (!out) fail(path, "write failed");
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open (missing file?)");

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail(path, "bad magic, not a crackseg tensor archive");
  }
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kFormatVersion) {
    fail(path, "unsupported format version " + std::to_string(version));
  }
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len == 0 || header_len > (1ull << 30)) {
    fail(path, "corrupt header length");
  }
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) fail(path, "truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    fail(path, std::string("header parse error: ") + e.what());
  }

  TensorArchive archive;
  *archive.meta_ = header.value("meta", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    ArchiveEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<std::vector<int>>();
    const uint64_t nbytes = t.at("nbytes").get<uint64_t>();
    if (nbytes != static_cast<uint64_t>(shape_numel(e.shape)) * sizeof(float)) {
      fail(path, "entry '" + e.name + "' has inconsistent shape/nbytes");
    }
    e.data.resize(nbytes / sizeof(float));
    in.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(nbytes));
    if (!in) fail(path, "truncated data for entry '" + e.name + "'");
    archive.index_[e.name] = archive.entries_.size();
    archive.entries_.push_back(std::move(e));
  }
  return archive;
}

}  // namespace crackseg
