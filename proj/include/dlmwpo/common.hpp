#pragma once

// Shared error taxonomy and small helpers used across the library.
//
// Error conventions:
//   std::invalid_argument  bad inputs (shapes, token ids, malformed files)
//   config_error           inconsistent or incomplete configuration
//   numeric_error           non-finite values where finite ones are required
//   capability_error        a request outside an op's supported envelope
//   generation_error        bounded-retry instance generation gave up
//   std::domain_error       mathematical domain violations (e.g. log of zero mass)

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dlmwpo {

struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error("config: " + msg) {}
};

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error("numeric: " + msg) {}
};

struct capability_error : std::runtime_error {
  explicit capability_error(const std::string& msg) : std::runtime_error("capability: " + msg) {}
};

struct generation_error : std::runtime_error {
  explicit generation_error(const std::string& msg) : std::runtime_error("generation: " + msg) {}
};

template <typename T>
inline bool is_finite(T x) {
  return std::isfinite(static_cast<double>(x));
}

// FNV-1a over bytes; used for config hashes and snapshot fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace dlmwpo
