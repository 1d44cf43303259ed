#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace safepred {

/// Calibrated safety chance g and the true label.
struct ScoredPair {
  double g = 0.0;
  int label = 0;
};

struct ScoreRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct BinnedValidation {
  std::vector<std::vector<ScoredPair>> bins;
  std::vector<ScoreRange> ranges;
  std::size_t dropped = 0;

  int Q() const { return static_cast<int>(bins.size()); }
};

/// Stable sort by g, keep the first Q * floor(n / Q) pairs and cut them into Q
/// equal-count bins. The highest-scored remainder is dropped.
BinnedValidation adaptive_binning(std::span<const ScoredPair> pairs, int Q);

enum class QuantileRule { paper, standard };

const char* quantile_rule_name(QuantileRule rule);
QuantileRule parse_quantile_rule(const std::string& name);

/// 1-based rank n: paper ceil((M/2 + 1)(1 - alpha)), an error if above M;
/// standard min(M, ceil((M + 1)(1 - alpha))).
int conformal_quantile_index(int M, double alpha, QuantileRule rule);

struct ConformalBounds {
  std::vector<double> c;
  std::vector<ScoreRange> ranges;
  double alpha = 0.05;
  int M = 200;
  int N = 500;
  QuantileRule rule = QuantileRule::standard;
};

/// Per bin: M resamples of N pairs with replacement, delta = |mean g - mean label|,
/// c_j = n-th smallest delta. OpenMP over bins, one derived seed per bin.
ConformalBounds conformal_calibrate(const BinnedValidation& bv, double alpha, int M, int N, QuantileRule rule,
                                    std::uint64_t seed);
ConformalBounds conformal_calibrate_serial(const BinnedValidation& bv, double alpha, int M, int N, QuantileRule rule,
                                           std::uint64_t seed);

/// Bin for a score: inside a range, else the nearer boundary (ties to the
/// lower bin); below all ranges -> 0, above -> Q - 1.
int assign_bin(std::span<const ScoreRange> ranges, double g);

struct IntervalPrediction {
  double g = 0.0;
  int bin = 0;
  double lo = 0.0;
  double hi = 0.0;
};

IntervalPrediction interval_predict(const ConformalBounds& bounds, double g);

struct CoverageReport {
  std::vector<double> per_bin;
  double overall = 0.0;
  int trials = 0;
};

/// Bins `fresh` the same way as the validation data (Q equal-count bins by
/// score, bin j paired with c_j) and repeats the resample-and-score procedure
/// `trials` times per bin; a trial is covered when delta <= c_j.
CoverageReport empirical_coverage(const ConformalBounds& bounds, std::span<const ScoredPair> fresh, int trials, int N,
                                  std::uint64_t seed);

/// Columns bin, range_lo, range_hi, c.
void save_bounds_csv(const ConformalBounds& bounds, const std::filesystem::path& path);
/// Restores c and ranges; the remaining fields keep their defaults.
ConformalBounds load_bounds_csv(const std::filesystem::path& path);

}  // namespace safepred
