#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace safepred {

using Rng = std::mt19937_64;

// Splittable seed derivation: every stage draws from (root, stage, index) so
// reordering or skipping one stage never perturbs another.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stage, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t root, std::string_view stage, std::uint64_t index = 0) {
  return Rng(derive_seed(root, stage, index));
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n). n must be positive.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

/// Standard normal via Box-Muller (no cached second value, so draws are position-independent).
double standard_normal(Rng& rng);

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

}  // namespace safepred
