#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "safepred/sim.hpp"

namespace safepred {

enum class DatasetKind { obs_controller, obs_action };

const char* dataset_kind_name(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& name);

/// m frames ending at time_index, labelled with the safety of the state k steps later.
struct Sample {
  std::vector<ObservationPtr> window;
  std::vector<Action> actions;  // empty unless the dataset is obs_action
  int label = 0;
  int controller_id = 0;
  std::uint64_t trajectory_id = 0;
  std::size_t time_index = 0;

  const Observation& last_frame() const { return *window.back(); }
};

struct Dataset {
  DatasetKind kind = DatasetKind::obs_controller;
  int m = 1;
  int k = 0;
  std::set<int> controller_ids;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::array<std::size_t, 2> class_counts() const;

  /// Throws if samples disagree with kind/m/k or an obs_controller set mixes controllers.
  void validate() const;
};

/// Windows (y_{i-m+1}, ..., y_i) for every i in [m-1, len-1-k], labelled phi(x_{i+k}).
std::vector<Sample> build_windows(const Trajectory& traj, int m, int k, DatasetKind kind);

Dataset build_dataset(std::span<const Trajectory> trajectories, int m, int k, DatasetKind kind);

/// 1:1 class balance by resampling each class with replacement up to the larger count.
Dataset rebalance(const Dataset& ds, std::uint64_t seed);

struct SplitSpec {
  double train = 0.4;
  double calib = 0.2;
  double valid = 0.2;
  double test = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetSplits {
  Dataset train;
  Dataset calib;
  Dataset valid;
  Dataset test;
};

/// Assigns trajectory ids to the four splits (seeded shuffle, cumulative rounding).
std::array<std::vector<std::uint64_t>, 4> split_trajectory_ids(std::vector<std::uint64_t> ids,
                                                               const SplitSpec& spec);

/// Disjoint partition at trajectory granularity; throws if any split is empty.
DatasetSplits split_dataset(const Dataset& ds, const SplitSpec& spec);

inline constexpr int kDatasetFormatVersion = 1;

/// Header line (JSON) followed by one JSON record per sample; pixels rounded to 4 decimals.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

bool datasets_equal(const Dataset& a, const Dataset& b);

/// One-step forecasting example: the window of a sample and the frame right after it.
struct ForecastPair {
  const Sample* source = nullptr;
  ObservationPtr next;
};

/// Pairs samples (traj, t) with the last frame of sample (traj, t+1) when both exist.
/// The pointers refer into `ds`, which must outlive the result.
std::vector<ForecastPair> forecast_pairs(const Dataset& ds);

}  // namespace safepred
