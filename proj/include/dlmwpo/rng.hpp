#pragma once

// Counter-based random streams.
//
// A stream is (key, counter); every draw hashes the pair and bumps the counter,
// so streams serialize to two integers and independent substreams come from
// fork() with distinct salts. Draw order is the only hidden contract: callers
// that need replayable results must consume in a fixed order.

#include <cmath>
#include <cstdint>

namespace dlmwpo {

namespace detail {
// 64-bit avalanche (splitmix64 finalizer).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace detail

struct RngStream {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  RngStream() = default;
  explicit RngStream(std::uint64_t seed) : key(detail::mix64(seed ^ 0x5851f42d4c957f2dull)) {}

  // Independent child stream; the parent is not advanced.
  RngStream fork(std::uint64_t salt) const {
    RngStream s;
    s.key = detail::mix64(key ^ detail::mix64(salt ^ 0xd6e8feb86659fd93ull));
    s.counter = 0;
    return s;
  }

  std::uint64_t next_u64() { return detail::mix64(key ^ detail::mix64(counter++)); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    // n is tiny everywhere we use this; modulo bias is < n / 2^64.
    return next_u64() % n;
  }

  double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (the second is discarded so state stays
  // two integers and serialization is trivial).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }
};

}  // namespace dlmwpo
