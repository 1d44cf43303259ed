#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "safepred/rng.hpp"

namespace safepred {

inline constexpr double kSafeAngle = 6.0 * std::numbers::pi / 180.0;
inline constexpr double kActivityAngle = 48.0 * std::numbers::pi / 180.0;

/// Pole-cart constants. Defaults are the usual cartpole benchmark values.
struct SimConfig {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double force_mag = 10.0;
  double dt = 0.02;
  double init_spread = 0.05;

  /// Reads `key = value` lines; unknown keys are an error, `#` starts a comment.
  static SimConfig load(const std::filesystem::path& path);
};

struct SystemState {
  double cart_pos = 0.0;
  double cart_vel = 0.0;
  double pole_angle = 0.0;
  double pole_angvel = 0.0;

  bool operator==(const SystemState&) const = default;
};

enum class Action : std::int8_t { left = -1, right = 1 };

inline double action_value(Action a) { return static_cast<double>(static_cast<int>(a)); }

struct Observation {
  static constexpr int kHeight = 32;
  static constexpr int kWidth = 32;
  static constexpr int kPixels = kHeight * kWidth;

  std::array<float, kPixels> pixels{};

  float at(int row, int col) const { return pixels[static_cast<std::size_t>(row * kWidth + col)]; }
  float& at(int row, int col) { return pixels[static_cast<std::size_t>(row * kWidth + col)]; }
  bool operator==(const Observation&) const = default;
};

using ObservationPtr = std::shared_ptr<const Observation>;

enum class ControllerKind { bang_bang, linear_feedback, noisy_feedback };

const char* controller_kind_name(ControllerKind kind);

struct ControllerSpec {
  ControllerKind kind = ControllerKind::linear_feedback;
  std::vector<double> gains;  // weights on (x, x_dot, theta, theta_dot)
  double noise_prob = 0.0;
  int id = 0;
};

/// The three controller tiers used to collect data, ids 0..2.
std::vector<ControllerSpec> default_controllers();

struct Step {
  SystemState state;
  ObservationPtr observation;
  Action action = Action::left;
  int label = 0;
};

struct Trajectory {
  std::vector<Step> steps;
  int controller_id = 0;
  std::uint64_t id = 0;

  std::size_t size() const { return steps.size(); }
};

/// Explicit Euler step of the pole-cart equations with a raw force. Throws on
/// a non-finite result.
SystemState step_dynamics_force(const SystemState& state, double force, const SimConfig& cfg);

inline SystemState step_dynamics(const SystemState& state, Action action, const SimConfig& cfg) {
  return step_dynamics_force(state, action_value(action) * cfg.force_mag, cfg);
}

/// 1 iff |pole_angle| <= 6 degrees (closed interval).
int safety_of_state(const SystemState& state);

/// 32x32 grayscale render: background 1, cart and pole 0, no anti-aliasing.
Observation render_observation(const SystemState& state);

/// Column of the pole pivot (a pixel boundary) for a cart position.
int cart_pivot_column(double cart_pos);

/// Pole geometry in pixels, exposed for tests.
struct PoleGeometry {
  static constexpr double pivot_row = 26.0;  // top edge of the cart
  static constexpr double length = 21.0;
  static constexpr int cart_rows = 3;
  static constexpr int cart_half_width = 4;
  static double half_width();
};

Action choose_action(const ControllerSpec& controller, const SystemState& state, Rng& rng);

SystemState sample_initial_state(Rng& rng, const SimConfig& cfg);

/// Rolls the closed loop for up to max_len steps, stopping early when the pole
/// leaves the activity range. Throws if `init` is already outside it.
Trajectory run_episode(const ControllerSpec& controller, const SystemState& init, std::size_t max_len,
                       std::uint64_t seed, const SimConfig& cfg);

struct EpisodeJob {
  ControllerSpec controller;
  SystemState init;
  std::size_t max_len = 0;
  std::uint64_t seed = 0;
  std::uint64_t trajectory_id = 0;
};

/// Runs independent episodes; OpenMP over jobs. Output order follows input order.
std::vector<Trajectory> run_episodes(std::span<const EpisodeJob> jobs, const SimConfig& cfg);

/// Serial reference for run_episodes.
std::vector<Trajectory> run_episodes_serial(std::span<const EpisodeJob> jobs, const SimConfig& cfg);

}  // namespace safepred
