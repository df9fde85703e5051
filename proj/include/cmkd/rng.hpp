// Copyright 2026 the cmkd authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace cmkd {

/// Deterministic random stream. All draws are implemented on top of the raw
/// mt19937_64 output so results do not depend on the standard library's
/// distribution internals; a fixed seed reproduces every sequence bitwise.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive, unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(eng_());  // full range
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % span;
    std::uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  /// Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double gaussian() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  /// Beta(a, b) for positive integer shape parameters, via the order-statistic
  /// identity: the a-th smallest of a+b-1 uniforms is Beta(a, b) distributed.
  double beta_int(int a, int b) {
    const int n = a + b - 1;
    scratch_.resize(static_cast<std::size_t>(n));
    for (auto& v : scratch_) v = uniform();
    std::nth_element(scratch_.begin(), scratch_.begin() + (a - 1), scratch_.end());
    return scratch_[static_cast<std::size_t>(a - 1)];
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  std::vector<double> scratch_;
};

/// FNV-1a hash, used to derive independent sub-seeds from a run seed and to
/// fingerprint canonical config text.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline Rng subrng(std::uint64_t seed, std::string_view stream) {
  return Rng(seed ^ fnv1a(stream));
}

}  // namespace cmkd
