#pragma once
// Error taxonomy, deterministic RNG, hashing and small text helpers shared by
// every module.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace scalemix {

// ===== error taxonomy =====
// All failures derive from Error; the CLI maps concrete types to exit codes
// (config 2, pipeline prerequisite 3, divergence 4).

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Tensor dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};
// Grid/patch geometry violations (non-divisible extents, misaligned regions).
struct GeometryError : Error {
  using Error::Error;
};
// Bad configuration values or unknown config keys.
struct ConfigError : Error {
  using Error::Error;
};
// Violated API preconditions (non-scalar loss, dt out of range, ...).
struct ContractError : Error {
  using Error::Error;
};
// Missing staged-pipeline prerequisites (e.g. rollout-ft without one-step).
struct PipelineError : Error {
  using Error::Error;
};
// Non-finite training loss.
struct DivergenceError : Error {
  using Error::Error;
};
// Malformed files; carries the byte offset of the defect.
struct ParseError : Error {
  ParseError(const std::string& msg, uint64_t offset)
      : Error(msg + " at byte offset " + std::to_string(offset)), offset(offset) {}
  uint64_t offset;
};

// ===== hashing =====

inline uint64_t fnv1a64(const void* data, size_t len,
                        uint64_t h = 14695981039346656037ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s,
                        uint64_t h = 14695981039346656037ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ===== deterministic RNG =====
// splitmix64 core; all randomness in the artifact flows from explicit seeds
// through this generator, never from wall-clock or global state.

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes exactly two uniforms.
  double normal() {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n) without modulo bias.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw ContractError("uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return static_cast<int64_t>(v % un);
  }

  // m distinct indices from [0, n), by partial Fisher-Yates; order as drawn.
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t m) {
    if (m > n) throw ContractError("sample_without_replacement: m > n");
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
      const int64_t j = i + uniform_int(n - i);
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
      out.push_back(pool[static_cast<size_t>(i)]);
    }
    return out;
  }

 private:
  uint64_t state_;
};

// Derives an independent stream for a named entity (parameter, data split...)
// so initialization is independent of construction order.
inline Rng named_rng(uint64_t base_seed, const std::string& name) {
  return Rng(base_seed ^ fnv1a64(name));
}

// ===== text helpers =====

// Shortest round-trip decimal for f64; used by every CSV/manifest writer so
// reruns are byte-identical.
inline std::string fmt_f64(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace scalemix
