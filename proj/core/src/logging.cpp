// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/logging.hpp"

#include <atomic>
#include <cstdio>

namespace crackseg::log {

namespace {
std::atomic<Level> g_level{Level::kInfo};

const char* tag(Level level) {
  switch (level) {
    case Level::kDebug: return "debug";
    case Level::kInfo: return "info";
    case Level::kWarn: return "warn";
    case Level::kError: return "error";
  }
  return "?";
}
}  // namespace

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }

void emit(Level lvl, const std::string& message) {
  if (static_cast<int>(lvl) < static_cast<int>(g_level.load())) return;
  std::fprintf(stderr, "[crackseg %s] %s\n", tag(lvl), message.c_str());
  std::fflush(stderr);
}

void debug(const std::string& message) { emit(Level::kDebug, message); }
void info(const std::string& message) { emit(Level::kInfo, message); }
void warn(const std::string& message) { emit(Level::kWarn, message); }
void error(const std::string& message) { emit(Level::kError, message); }

}  // namespace crackseg::log
