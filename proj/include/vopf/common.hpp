#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vopf {

/// Structural problem in an input file (bad table, missing column, ...).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Semantically invalid data (duplicate reference bus, isolated bus, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical routine failed (singular Jacobian, non-convergence, ...).
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline double deg2rad(double d) { return d * (kPi / 180.0); }
inline double rad2deg(double r) { return r * (180.0 / kPi); }

/// Degree value whose parse (deg2rad) reproduces `rad` bit-exactly, when such
/// a double exists within 2 ulps of the naive conversion. Keeps serialize →
/// parse round trips lossless for angle fields stored in degrees.
inline double rad2deg_exact(double rad) {
  double d = rad2deg(rad);
  if (deg2rad(d) == rad) return d;
  double lo = d, hi = d;
  for (int i = 0; i < 2; ++i) {
    lo = std::nextafter(lo, -kInf);
    hi = std::nextafter(hi, kInf);
    if (deg2rad(lo) == rad) return lo;
    if (deg2rad(hi) == rad) return hi;
  }
  return d;
}

/// 64-bit FNV-1a; used for content fingerprints (pairing checks, not crypto).
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

/// Shortest text that still round-trips a double exactly (17 significant digits).
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

/// Mixes a base seed with a textual tag; used to derive independent stream
/// seeds (per bus group, per epoch) from one user-facing seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = fnv1a64(tag);
  // splitmix64 finalizer over seed ^ tag-hash
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Deterministic uniform generator. Uniform doubles are built from the raw
/// 64-bit stream directly so sequences do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// U[0,1) with 53 random bits.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Fisher-Yates; index draws via modulo-free rejection-less bounded draw
  /// (bias < 2^-53 per draw, irrelevant here; what matters is determinism).
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform01() * static_cast<double>(i));
      if (j >= i) j = i - 1;
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace vopf
