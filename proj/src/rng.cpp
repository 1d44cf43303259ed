#include "safepred/rng.hpp"
#include "safepred/error.hpp"

#include <cmath>
#include <numbers>

namespace safepred {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view stage, std::uint64_t index) {
  return splitmix64(splitmix64(root) ^ splitmix64(fnv1a(stage) + index));
}

std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  // Lemire's rejection keeps the draw unbiased.
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = rng();
    const unsigned __int128 m = static_cast<unsigned __int128>(r) * n;
    if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::uint64_t>(m >> 64);
  }
}

double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::integration_blowup: return "integration-blowup";
    case Errc::trajectory_too_short: return "trajectory-too-short";
    case Errc::rebalance_impossible: return "rebalance-impossible";
    case Errc::empty_split: return "empty-split";
    case Errc::format: return "format";
    case Errc::io: return "io";
    case Errc::divergence: return "divergence";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::single_class: return "single-class";
    case Errc::quantile_out_of_range: return "quantile-out-of-range";
    case Errc::insufficient_data: return "insufficient-data";
  }
  return "unknown";
}

}  // namespace safepred
