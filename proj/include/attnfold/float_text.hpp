#pragma once

#include <charconv>
#include <cstdlib>
#include <string>

namespace attnfold {

// The double whose shortest decimal form is the shortest decimal that reads
// back as f. JSON writers print it as, e.g., 0.83 rather than 0.8299999833.
inline double shortest_float(float f) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, f);
  return std::strtod(std::string(buf, end).c_str(), nullptr);
}

}  // namespace attnfold
