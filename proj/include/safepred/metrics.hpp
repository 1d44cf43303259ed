#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "safepred/conformal.hpp"

namespace safepred {

/// Positive class is "safe" (label 1).
struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;  // predicted safe, actually unsafe
  std::size_t fn = 0;
  std::size_t tn = 0;
};

Confusion confusion(std::span<const int> predictions, std::span<const int> labels);
/// 0 when precision + recall = 0.
double f1_score(std::span<const int> predictions, std::span<const int> labels);
/// FP / (FP + TN); 0 when there are no unsafe labels.
double false_positive_rate(std::span<const int> predictions, std::span<const int> labels);
double accuracy(std::span<const int> predictions, std::span<const int> labels);

std::vector<ScoredPair> make_pairs(std::span<const double> scores, std::span<const int> labels);

struct EceMce {
  double ece = 0.0;
  double mce = 0.0;
};

/// Equal-count Q-binning by score; the dropped remainder counts for neither.
EceMce ece_mce(std::span<const double> scores, std::span<const int> labels, int Q);

struct ReliabilityRow {
  int bin = 0;
  double conf = 0.0;
  double acc = 0.0;
  std::size_t count = 0;
  std::optional<double> c;

  bool operator==(const ReliabilityRow&) const = default;
};

std::vector<ReliabilityRow> reliability_data(std::span<const double> scores, std::span<const int> labels, int Q,
                                             const ConformalBounds* bounds = nullptr);

/// Columns bin, conf, acc, count, c (empty cell when no bound).
void write_reliability_csv(std::span<const ReliabilityRow> rows, const std::filesystem::path& path);
std::vector<ReliabilityRow> read_reliability_csv(const std::filesystem::path& path);

struct MetricsRow {
  std::string predictor;
  int k = 0;
  std::string split;
  std::string calibration;  // "uncalibrated" or the calibrator kind
  double f1 = 0.0;
  double fpr = 0.0;
  double ece = 0.0;
  double mce = 0.0;
  std::size_t n = 0;

  bool operator==(const MetricsRow&) const = default;
};

/// Columns predictor, k, split, calibration, f1, fpr, ece, mce, n.
void write_metrics_csv(std::span<const MetricsRow> rows, const std::filesystem::path& path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace safepred
