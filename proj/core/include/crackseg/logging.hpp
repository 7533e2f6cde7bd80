// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

namespace crackseg::log {

enum class Level { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3 };

// Minimum level printed to stderr. Defaults to kInfo.
void set_level(Level level);
Level level();

void emit(Level level, const std::string& message);

void debug(const std::string& message);
void info(const std::string& message);
void warn(const std::string& message);
void error(const std::string& message);

}  // namespace crackseg::log
