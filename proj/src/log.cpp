#include "msg/log.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>

namespace msg::log {
namespace {
std::atomic<Level> g_level{Level::kInfo};
std::mutex g_mutex;
}  // namespace

void set_level(Level l) { g_level = l; }
Level level() { return g_level; }

void write(Level l, std::string_view message) {
  if (l < g_level.load()) return;
  static constexpr const char* kTags[] = {"debug", "info", "warn", "error"};
  std::lock_guard lock(g_mutex);
  std::fprintf(stderr, "[%s] %.*s\n", kTags[static_cast<int>(l)], static_cast<int>(message.size()), message.data());
}

}  // namespace msg::log
