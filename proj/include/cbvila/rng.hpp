#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cbvila {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Stream labels for derived RNG streams. Every random decision in the
/// system draws from a stream keyed by (seed, purpose, indices...), so any
/// point of a run can be reproduced without replaying earlier steps.
enum class RngStream : std::uint64_t {
  init = 1,
  data_item = 2,
  shuffle = 3,
  text_mask = 4,
  visual_mask = 5,
  gumbel = 6,
  negatives = 7,
  dead_codes = 8,
  test = 9,
};

inline std::uint64_t derive_seed(std::uint64_t seed, RngStream purpose,
                                 std::initializer_list<std::uint64_t> indices = {}) {
  std::uint64_t h = detail::splitmix64(seed ^ 0x243f6a8885a308d3ULL);
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(purpose));
  for (std::uint64_t v : indices) h = detail::splitmix64(h ^ v);
  return h;
}

/// Deterministic RNG. The engine (mt19937_64) is pinned by the standard;
/// the distribution mappings are implemented here because the std
/// distributions are implementation-defined and would break cross-compiler
/// reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  Rng(std::uint64_t seed, RngStream purpose, std::initializer_list<std::uint64_t> indices = {})
      : engine_(derive_seed(seed, purpose, indices)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling keeps the mapping exact.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (no cached spare, keeps streams simple).
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Gumbel(0,1) noise, clamped away from the poles of -log(-log(u)).
  double gumbel() {
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    if (u > 1.0 - 1e-16) u = 1.0 - 1e-16;
    return -std::log(-std::log(u));
  }

  /// Partial Fisher-Yates: first `take` entries of a random permutation of [0, n).
  std::vector<int> sample_without_replacement(int n, int take) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    if (take > n) take = n;
    for (int i = 0; i < take; ++i) {
      const int j = i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(take));
    return idx;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cbvila
