#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "safepred/calib.hpp"
#include "safepred/conformal.hpp"
#include "safepred/data.hpp"
#include "safepred/metrics.hpp"
#include "safepred/nets.hpp"
#include "safepred/predictors.hpp"
#include "safepred/sim.hpp"

namespace safepred {

/// Controller-specific ("specific") data comes from one controller without
/// actions; controller-independent ("independent") data mixes all controllers
/// and records actions.
enum class ControllerSet { specific, independent };
const char* controller_set_name(ControllerSet set);
ControllerSet parse_controller_set(const std::string& name);

enum class EvaluatorChoice { learned, augmented, robust_feature };
const char* evaluator_choice_name(EvaluatorChoice e);
EvaluatorChoice parse_evaluator_choice(const std::string& name);

struct RunConfig {
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;

  // simulate
  int m = 5;
  std::vector<int> horizons{1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::size_t windows = 20000;  // per controller set, counted at the smallest horizon
  std::size_t episode_length = 300;
  int controller = 1;
  std::optional<std::filesystem::path> sim_config;
  std::vector<ControllerSet> sets{ControllerSet::specific, ControllerSet::independent};
  SplitSpec split;

  // train
  std::vector<PredictorKind> kinds{PredictorKind::monolithic, PredictorKind::composite_image,
                                   PredictorKind::composite_latent};
  ArchConfig arch;
  TrainConfig monolithic{0.05, 128, 60, 0.1, 5, 15, 0};
  TrainConfig forecaster{5.0, 16, 25, 0.1, 5, 15, 0};
  TrainConfig evaluator{0.05, 64, 30, 0.1, 5, 15, 0};
  TrainConfig autoencoder{0.002, 64, 30, 0.1, 5, 15, 0};
  TrainConfig latent_forecaster{0.05, 64, 60, 0.1, 5, 15, 0};
  double lambda1 = 1.0;
  double lambda2 = static_cast<double>(Observation::kPixels);
  EvaluatorChoice evaluator_choice = EvaluatorChoice::augmented;
  std::size_t max_evaluator_images = 8000;
  std::size_t max_autoencoder_images = 4000;

  // calibrate / evaluate
  int Q = 10;
  int M = 200;
  int N = 500;
  double alpha = 0.05;
  QuantileRule rule = QuantileRule::standard;
  int coverage_trials = 200;

  void validate() const;
  SimConfig sim() const;
};

struct SetData {
  std::vector<Trajectory> trajectories;
  std::array<std::vector<std::uint64_t>, 4> split_ids;
};

/// Episodes for one controller set until the smallest horizon yields `windows`
/// windows, plus the trajectory-level split shared by every horizon.
SetData simulate_set(const RunConfig& cfg, ControllerSet set);

/// Dataset for horizon k, cut into the shared splits. Trajectories shorter
/// than m + k are skipped.
DatasetSplits build_splits(const RunConfig& cfg, ControllerSet set, const SetData& data, int k);

/// Use-time 1:1 rebalancing with a seed per (set, split, k).
Dataset rebalanced(const RunConfig& cfg, const Dataset& ds, ControllerSet set, const std::string& split);

std::filesystem::path dataset_path(const RunConfig& cfg, ControllerSet set, int k, const std::string& split);
std::filesystem::path bundle_path(const RunConfig& cfg, ControllerSet set, PredictorKind kind, int k);
std::string predictor_label(ControllerSet set, PredictorKind kind);

/// Everything calibration produces for one predictor.
struct CalibrationResult {
  CalibSelection selection;
  ConformalBounds standard;
  ConformalBounds paper;
};

CalibrationResult calibrate_scores(const RunConfig& cfg, std::span<const double> calib_scores,
                                   std::span<const int> calib_labels, std::span<const double> valid_scores,
                                   std::span<const int> valid_labels, std::uint64_t seed);

std::vector<int> labels_of(const Dataset& ds);

void cmd_simulate(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_calibrate(const RunConfig& cfg, std::ostream& log);
void cmd_evaluate(const RunConfig& cfg, std::ostream& log);

}  // namespace safepred
