#pragma once

#include <cstddef>

namespace msg::detail {

// Mirror index into [0, n) without repeating the edge sample (numpy "reflect"),
// applied repeatedly for offsets further than n away.
inline std::size_t reflect_index(std::ptrdiff_t j, std::ptrdiff_t n) {
  if (n <= 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  j %= period;
  if (j < 0) j += period;
  return static_cast<std::size_t>(j < n ? j : period - j);
}

}  // namespace msg::detail
