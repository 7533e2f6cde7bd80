// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "crackseg/logging.hpp"
#include "crackseg/pooling.hpp"
#include "crackseg/segment.hpp"

namespace crackseg {

void DataConfig::validate() const {
  split.validate();
  if (split_by_module && module_map.empty()) {
    throw std::invalid_argument(
        "data config: split_by_module requires module_map; the public index "
        "carries no module ids");
  }
}

void SweepSettings::validate() const {
  if (p_values.empty()) {
    throw std::invalid_argument("sweep config: p_values must not be empty");
  }
  for (const double p : p_values) {
    PoolingSpec::lp(p).validate();
  }
  if (repeats < 1) {
    throw std::invalid_argument("sweep config: repeats must be >= 1, got " +
                                std::to_string(repeats));
  }
}

void SegmentSettings::validate() const {
  if (polarity != "auto" && !parse_polarity(polarity)) {
    throw std::invalid_argument(
        "segment config: polarity must be 'direct', 'inverted' or 'auto', got '" +
        polarity + "'");
  }
}

void ExperimentConfig::validate() const {
  data.validate();
  model.validate();
  train.validate();
  sweep.validate();
  segment.validate();
}

void to_json(nlohmann::json& j, const DataConfig& cfg) {
  j = nlohmann::json{
      {"root", cfg.root},
      {"labels_file", cfg.labels_file},
      {"policy", to_string(cfg.policy)},
      {"split",
       {{"train", cfg.split.train},
        {"val", cfg.split.val},
        {"test", cfg.split.test}}},
      {"split_seed", cfg.split_seed},
      {"split_by_module", cfg.split_by_module},
      {"module_map", cfg.module_map},
  };
}

void from_json(const nlohmann::json& j, DataConfig& cfg) {
  const DataConfig defaults;
  cfg.root = j.value("root", defaults.root);
  cfg.labels_file = j.value("labels_file", defaults.labels_file);
  if (j.contains("policy")) {
    const auto text = j.at("policy").get<std::string>();
    const auto policy = parse_label_policy(text);
    if (!policy) {
      throw std::invalid_argument("data config: unknown label policy '" + text +
                                  "'");
    }
    cfg.policy = *policy;
  }
  if (j.contains("split")) {
    const auto& split = j.at("split");
    cfg.split.train = split.value("train", defaults.split.train);
    cfg.split.val = split.value("val", defaults.split.val);
    cfg.split.test = split.value("test", defaults.split.test);
  }
  cfg.split_seed = j.value("split_seed", defaults.split_seed);
  cfg.split_by_module = j.value("split_by_module", defaults.split_by_module);
  cfg.module_map = j.value("module_map", defaults.module_map);
}

void to_json(nlohmann::json& j, const SweepSettings& cfg) {
  nlohmann::json values = nlohmann::json::array();
  for (const double p : cfg.p_values) values.push_back(PoolingSpec{p}.p_str());
  j = nlohmann::json{{"p_values", values}, {"repeats", cfg.repeats}};
}

void from_json(const nlohmann::json& j, SweepSettings& cfg) {
  const SweepSettings defaults;
  if (j.contains("p_values")) {
    cfg.p_values.clear();
    for (const auto& entry : j.at("p_values")) {
      if (entry.is_string()) {
        const auto text = entry.get<std::string>();
        const auto p = parse_exponent(text);
        if (!p) {
          throw std::invalid_argument("sweep config: unparsable exponent '" +
                                      text + "'");
        }
        cfg.p_values.push_back(*p);
      } else {
        cfg.p_values.push_back(entry.get<double>());
      }
    }
  } else {
    cfg.p_values = defaults.p_values;
  }
  cfg.repeats = j.value("repeats", defaults.repeats);
}

void to_json(nlohmann::json& j, const SegmentSettings& cfg) {
  j = nlohmann::json{{"polarity", cfg.polarity}};
}

void from_json(const nlohmann::json& j, SegmentSettings& cfg) {
  const SegmentSettings defaults;
  cfg.polarity = j.value("polarity", defaults.polarity);
}

void to_json(nlohmann::json& j, const ExperimentConfig& cfg) {
  j = nlohmann::json{
      {"data", cfg.data},     {"model", cfg.model},
      {"train", cfg.train},   {"sweep", cfg.sweep},
      {"segment", cfg.segment}, {"output_dir", cfg.output_dir},
  };
}

void from_json(const nlohmann::json& j, ExperimentConfig& cfg) {
  const ExperimentConfig defaults;
  if (j.contains("data")) j.at("data").get_to(cfg.data);
  if (j.contains("model")) j.at("model").get_to(cfg.model);
  if (j.contains("train")) j.at("train").get_to(cfg.train);
  if (j.contains("sweep")) j.at("sweep").get_to(cfg.sweep);
  if (j.contains("segment")) j.at("segment").get_to(cfg.segment);
  cfg.output_dir = j.value("output_dir", defaults.output_dir);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("config '" + path.string() +
                             "' not found or unreadable");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config '" + path.string() + "': " + e.what());
  }
  if (!j.is_object()) {
    throw std::runtime_error("config '" + path.string() +
                             "': top level must be an object");
  }
  static const std::set<std::string> known{"data",  "model",   "train",
                                           "sweep", "segment", "output_dir"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) {
      log::warn("config '" + path.string() + "': unknown key '" + key +
                "' ignored");
    }
  }
  ExperimentConfig cfg = j.get<ExperimentConfig>();
  cfg.validate();
  return cfg;
}

void save_experiment_config(const ExperimentConfig& cfg,
                            const std::filesystem::path& path) {
  const nlohmann::json j = cfg;
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("config: cannot write '" + path.string() + "'");
  }
  out << j.dump(2) << '\n';
}

std::vector<double> parse_p_list(const std::string& text) {
  std::vector<double> values;
  std::istringstream stream(text);
  std::string token;
  while (std::getline(stream, token, ',')) {
    const size_t first = token.find_first_not_of(" \t");
    const size_t last = token.find_last_not_of(" \t");
    if (first == std::string::npos) continue;
    const std::string trimmed = token.substr(first, last - first + 1);
    const auto p = parse_exponent(trimmed);
    if (!p) {
      throw std::invalid_argument("unparsable exponent '" + trimmed +
                                  "' in p list '" + text + "'");
    }
    PoolingSpec::lp(*p).validate();
    values.push_back(*p);
  }
  if (values.empty()) {
    throw std::invalid_argument("empty p list '" + text + "'");
  }
  return values;
}

std::string format_p_list(const std::vector<double>& p_values) {
  std::string out;
  for (size_t i = 0; i < p_values.size(); ++i) {
    if (i > 0) out += ", ";
    out += PoolingSpec{p_values[i]}.p_str();
  }
  return out;
}

}  // namespace crackseg
