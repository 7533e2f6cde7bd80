// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "crackseg/tensor.hpp"

namespace crackseg {

/// One named tensor inside an archive file.
struct ArchiveEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

/// Self-describing container for named float32 tensors plus a free-form
/// JSON metadata block. Used for checkpoints and pretrained backbone
/// weights. Layout: magic, format version, JSON header, raw little-endian
/// tensor data.
class TensorArchive {
 public:
  TensorArchive();
  ~TensorArchive();
  TensorArchive(TensorArchive&&) noexcept;
  TensorArchive& operator=(TensorArchive&&) noexcept;
  TensorArchive(const TensorArchive&) = delete;
  TensorArchive& operator=(const TensorArchive&) = delete;

  void add(const std::string& name, const std::vector<int>& shape,
           std::span<const float> values);

  bool has(const std::string& name) const;
  /// nullptr when absent.
  const ArchiveEntry* find(const std::string& name) const;
  const std::vector<ArchiveEntry>& entries() const { return entries_; }

  nlohmann::json& meta();
  const nlohmann::json& meta() const;

  void save(const std::filesystem::path& path) const;
  /// Throws std::runtime_error with the offending path / reason on any
  /// missing, truncated or foreign file.
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::vector<ArchiveEntry> entries_;
  std::map<std::string, size_t> index_;
  std::unique_ptr<nlohmann::json> meta_;
};

}  // namespace crackseg
