#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace safepred {

enum class CalibratorKind { platt, temperature, histogram, isotonic, beta };

const char* calibrator_kind_name(CalibratorKind kind);
CalibratorKind parse_calibrator_kind(const std::string& name);

/// Selection tie order: isotonic, temperature, platt, beta, histogram.
int calibrator_tie_rank(CalibratorKind kind);

/// Monotone map from an uncalibrated safe-probability to a calibrated one.
struct Calibrator {
  CalibratorKind kind = CalibratorKind::isotonic;
  std::vector<double> params;  // platt (a, b); temperature (T); beta (a, b, c)
  std::vector<double> edges;   // histogram: inner bin boundaries; isotonic: sorted distinct scores
  std::vector<double> values;  // histogram: one per bin; isotonic: one per score

  double apply(double score) const;
  std::vector<double> apply(std::span<const double> scores) const;

  nlohmann::json to_json() const;
  static Calibrator from_json(const nlohmann::json& j);
  bool operator==(const Calibrator&) const = default;
};

inline constexpr double kCalibEpsilon = 1e-7;

double logit(double p);
double sigmoid(double x);

/// apply(s) = sigmoid(a * logit(s) + b), fitted by 2000 gradient steps (lr 0.1)
/// on the standardised logit. Throws Errc::single_class.
Calibrator fit_platt(std::span<const double> scores, std::span<const int> labels);

/// T in [0.05, 20] minimising the CE of softmax(logits / T), by golden-section
/// search. Logit pairs are (safe, unsafe).
Calibrator fit_temperature(std::span<const std::array<double, 2>> logits, std::span<const int> labels);
/// Same fit on the margin logit(s), which is all a binary softmax score keeps.
Calibrator fit_temperature(std::span<const double> scores, std::span<const int> labels);
/// softmax(logits / T), safe class first.
double apply_temperature(const Calibrator& cal, const std::array<double, 2>& logits);

/// Q equal-count bins over the sorted scores; bin values made nondecreasing by
/// pooling adjacent violators. Throws Errc::insufficient_data when n < Q.
Calibrator fit_histogram(std::span<const double> scores, std::span<const int> labels, int Q);

/// Pool-adjacent-violators on labels sorted by score (tied scores pooled first).
Calibrator fit_isotonic(std::span<const double> scores, std::span<const int> labels);

/// Weighted least-squares nondecreasing fit of y, in the given order.
std::vector<double> pava(std::span<const double> y, std::span<const double> w = {});

/// apply(s) = sigmoid(a ln s - b ln(1 - s) + c) with a, b >= 0, fitted by
/// projected gradient descent. Throws Errc::single_class.
Calibrator fit_beta(std::span<const double> scores, std::span<const int> labels);

/// All five kinds; independent fits run in parallel. Kinds that cannot be
/// fitted on single-class data are skipped.
std::vector<Calibrator> fit_all(std::span<const double> scores, std::span<const int> labels, int Q);

struct CalibSelection {
  Calibrator chosen;
  std::vector<std::pair<CalibratorKind, double>> ece;  // candidate order
};

/// ECE with adaptive Q bins of every candidate; minimum wins, ties by kind order.
CalibSelection select_min_ece(std::span<const Calibrator> candidates, std::span<const double> scores,
                              std::span<const int> labels, int Q);

void save_calibrator(const Calibrator& cal, const std::filesystem::path& path);
Calibrator load_calibrator(const std::filesystem::path& path);

/// Columns kind, ece, chosen.
void save_selection_csv(const CalibSelection& sel, const std::filesystem::path& path);

}  // namespace safepred
