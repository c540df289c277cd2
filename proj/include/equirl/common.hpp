#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace equirl {

using Rng = std::mt19937_64;

constexpr double kPi = 3.14159265358979323846;

// Non-recoverable contract violations (shape mismatches, bad group orders,
// malformed files) are reported as exceptions carrying a formatted message.
template <typename... Args>
[[noreturn]] void fail(Args&&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  throw std::invalid_argument(os.str());
}

template <typename... Args>
void require(bool cond, Args&&... parts) {
  if (!cond) fail(std::forward<Args>(parts)...);
}

inline double uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng);
}

inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  std::uniform_int_distribution<std::int64_t> d(lo, hi);
  return d(rng);
}

inline double gaussian(Rng& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  return d(rng);
}

}  // namespace equirl
