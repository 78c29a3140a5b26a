#pragma once

#include <string_view>

namespace msg::log {

enum class Level { kDebug, kInfo, kWarn, kError };

// Messages below the threshold are dropped. Default: kInfo.
void set_level(Level level);
Level level();

void write(Level level, std::string_view message);

inline void info(std::string_view m) { write(Level::kInfo, m); }
inline void warn(std::string_view m) { write(Level::kWarn, m); }
inline void error(std::string_view m) { write(Level::kError, m); }

}  // namespace msg::log
