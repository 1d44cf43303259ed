#include "safepred/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "safepred/csv.hpp"
#include "safepred/error.hpp"
#include "safepred/parallel.hpp"
#include "safepred/rng.hpp"

namespace safepred {

namespace {

void check_params(const BinnedValidation& bv, double alpha, int M, int N) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw Error(Errc::invalid_argument, "alpha must lie in (0, 0.5)");
  if (M < 1 || N < 1) throw Error(Errc::invalid_argument, "M and N must be at least 1");
  if (bv.bins.empty()) throw Error(Errc::invalid_argument, "no bins");
  for (const auto& bin : bv.bins) {
    if (bin.empty()) throw Error(Errc::insufficient_data, "empty bin");
  }
}

double resample_delta(std::span<const ScoredPair> bin, int N, Rng& rng) {
  double g = 0.0, p = 0.0;
  for (int i = 0; i < N; ++i) {
    const auto& pair = bin[uniform_index(rng, bin.size())];
    g += pair.g;
    p += pair.label;
  }
  return std::abs(g - p) / static_cast<double>(N);
}

double bin_bound(std::span<const ScoredPair> bin, int M, int N, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> deltas(static_cast<std::size_t>(M));
  for (auto& d : deltas) d = resample_delta(bin, N, rng);
  std::nth_element(deltas.begin(), deltas.begin() + (n - 1), deltas.end());
  return deltas[static_cast<std::size_t>(n - 1)];
}

ConformalBounds make_bounds(const BinnedValidation& bv, double alpha, int M, int N, QuantileRule rule) {
  ConformalBounds b;
  b.c.assign(bv.bins.size(), 0.0);
  b.ranges = bv.ranges;
  b.alpha = alpha;
  b.M = M;
  b.N = N;
  b.rule = rule;
  return b;
}

}  // namespace

BinnedValidation adaptive_binning(std::span<const ScoredPair> pairs, int Q) {
  if (Q < 1) throw Error(Errc::invalid_argument, "Q must be at least 1");
  if (pairs.size() < static_cast<std::size_t>(Q)) {
    throw Error(Errc::insufficient_data, "adaptive binning needs at least Q = " + std::to_string(Q) + " pairs, got " +
                                             std::to_string(pairs.size()));
  }
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pairs[a].g < pairs[b].g; });
  const std::size_t per_bin = pairs.size() / static_cast<std::size_t>(Q);
  BinnedValidation bv;
  bv.bins.resize(static_cast<std::size_t>(Q));
  bv.ranges.resize(static_cast<std::size_t>(Q));
  for (std::size_t j = 0; j < bv.bins.size(); ++j) {
    auto& bin = bv.bins[j];
    bin.reserve(per_bin);
    for (std::size_t i = j * per_bin; i < (j + 1) * per_bin; ++i) bin.push_back(pairs[order[i]]);
    bv.ranges[j] = {bin.front().g, bin.back().g};
  }
  bv.dropped = pairs.size() - per_bin * bv.bins.size();
  return bv;
}

const char* quantile_rule_name(QuantileRule rule) { return rule == QuantileRule::paper ? "paper" : "standard"; }

QuantileRule parse_quantile_rule(const std::string& name) {
  if (name == "paper") return QuantileRule::paper;
  if (name == "standard") return QuantileRule::standard;
  throw Error(Errc::invalid_argument, "quantile rule must be 'paper' or 'standard', got '" + name + "'");
}

int conformal_quantile_index(int M, double alpha, QuantileRule rule) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw Error(Errc::invalid_argument, "alpha must lie in (0, 0.5)");
  if (M < 1) throw Error(Errc::invalid_argument, "M must be at least 1");
  // The small offset keeps exact products such as 101 * 0.95 from rounding up.
  if (rule == QuantileRule::paper) {
    const int n = static_cast<int>(std::ceil((M / 2.0 + 1.0) * (1.0 - alpha) - 1e-9));
    if (n > M) {
      const int required = static_cast<int>(std::ceil(2.0 * (1.0 - alpha) / alpha));
      throw Error(Errc::quantile_out_of_range, "paper quantile rank " + std::to_string(n) + " exceeds M = " +
                                                   std::to_string(M) + "; need M >= " + std::to_string(required));
    }
    return std::max(n, 1);
  }
  const int n = static_cast<int>(std::ceil((M + 1.0) * (1.0 - alpha) - 1e-9));
  return std::clamp(n, 1, M);
}

ConformalBounds conformal_calibrate(const BinnedValidation& bv, double alpha, int M, int N, QuantileRule rule,
                                    std::uint64_t seed) {
  check_params(bv, alpha, M, N);
  const int n = conformal_quantile_index(M, alpha, rule);
  auto bounds = make_bounds(bv, alpha, M, N, rule);
  parallel_for(static_cast<std::ptrdiff_t>(bv.bins.size()), [&](std::ptrdiff_t j) {
    const auto u = static_cast<std::size_t>(j);
    bounds.c[u] = bin_bound(bv.bins[u], M, N, n, derive_seed(seed, "conformal-bin", u));
  });
  return bounds;
}

ConformalBounds conformal_calibrate_serial(const BinnedValidation& bv, double alpha, int M, int N, QuantileRule rule,
                                           std::uint64_t seed) {
  check_params(bv, alpha, M, N);
  const int n = conformal_quantile_index(M, alpha, rule);
  auto bounds = make_bounds(bv, alpha, M, N, rule);
  for (std::size_t j = 0; j < bv.bins.size(); ++j) {
    bounds.c[j] = bin_bound(bv.bins[j], M, N, n, derive_seed(seed, "conformal-bin", j));
  }
  return bounds;
}

int assign_bin(std::span<const ScoreRange> ranges, double g) {
  if (ranges.empty()) throw Error(Errc::invalid_argument, "no bins");
  const int Q = static_cast<int>(ranges.size());
  if (g < ranges.front().lo) return 0;
  if (g > ranges.back().hi) return Q - 1;
  for (int j = 0; j < Q; ++j) {
    const auto& r = ranges[static_cast<std::size_t>(j)];
    if (g >= r.lo && g <= r.hi) return j;
    if (j + 1 < Q && g > r.hi && g < ranges[static_cast<std::size_t>(j + 1)].lo) {
      return (g - r.hi) <= (ranges[static_cast<std::size_t>(j + 1)].lo - g) ? j : j + 1;
    }
  }
  return Q - 1;
}

IntervalPrediction interval_predict(const ConformalBounds& bounds, double g) {
  if (bounds.c.size() != bounds.ranges.size()) throw Error(Errc::dimension_mismatch, "bounds and ranges differ");
  IntervalPrediction ip;
  ip.g = g;
  ip.bin = assign_bin(bounds.ranges, g);
  const double c = bounds.c[static_cast<std::size_t>(ip.bin)];
  ip.lo = std::max(0.0, g - c);
  ip.hi = std::min(1.0, g + c);
  return ip;
}

CoverageReport empirical_coverage(const ConformalBounds& bounds, std::span<const ScoredPair> fresh, int trials, int N,
                                  std::uint64_t seed) {
  if (trials < 1 || N < 1) throw Error(Errc::invalid_argument, "trials and N must be at least 1");
  const std::size_t Q = bounds.c.size();
  if (Q == 0 || bounds.ranges.size() != Q) throw Error(Errc::invalid_argument, "bounds have no bins");
  if (fresh.size() < Q) throw Error(Errc::insufficient_data, "fewer fresh pairs than bins");
  const auto bins = adaptive_binning(fresh, static_cast<int>(Q)).bins;
  CoverageReport report;
  report.trials = trials;
  report.per_bin.assign(Q, 0.0);
  parallel_for(static_cast<std::ptrdiff_t>(Q), [&](std::ptrdiff_t j) {
    const auto u = static_cast<std::size_t>(j);
    Rng rng = make_rng(seed, "coverage-bin", u);
    int covered = 0;
    for (int t = 0; t < trials; ++t) {
      if (resample_delta(bins[u], N, rng) <= bounds.c[u]) ++covered;
    }
    report.per_bin[u] = static_cast<double>(covered) / trials;
  });
  report.overall = std::accumulate(report.per_bin.begin(), report.per_bin.end(), 0.0) / static_cast<double>(Q);
  return report;
}

void save_bounds_csv(const ConformalBounds& bounds, const std::filesystem::path& path) {
  CsvTable table;
  table.header = {"bin", "range_lo", "range_hi", "c"};
  for (std::size_t j = 0; j < bounds.c.size(); ++j) {
    table.rows.push_back({std::to_string(j), format_double(bounds.ranges[j].lo), format_double(bounds.ranges[j].hi),
                          format_double(bounds.c[j])});
  }
  write_csv(path, table);
}

ConformalBounds load_bounds_csv(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto lo = table.column("range_lo"), hi = table.column("range_hi"), c = table.column("c");
  ConformalBounds b;
  for (const auto& row : table.rows) {
    b.ranges.push_back({parse_double(row[lo]), parse_double(row[hi])});
    b.c.push_back(parse_double(row[c]));
  }
  if (b.c.empty()) throw Error(Errc::format, path.string() + ": no bins");
  return b;
}

}  // namespace safepred
