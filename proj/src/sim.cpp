#include "safepred/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "safepred/error.hpp"
#include "safepred/parallel.hpp"

namespace safepred {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

SimConfig SimConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open sim config " + path.string());
  SimConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::format, path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string raw = trim(line.substr(eq + 1));
    double value = 0.0;
    try {
      std::size_t used = 0;
      value = std::stod(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
    } catch (const std::exception&) {
      throw Error(Errc::format, path.string() + ":" + std::to_string(lineno) + ": bad number '" + raw + "'");
    }
    if (key == "gravity") cfg.gravity = value;
    else if (key == "cart_mass") cfg.cart_mass = value;
    else if (key == "pole_mass") cfg.pole_mass = value;
    else if (key == "half_length") cfg.half_length = value;
    else if (key == "force_mag") cfg.force_mag = value;
    else if (key == "dt") cfg.dt = value;
    else if (key == "init_spread") cfg.init_spread = value;
    else throw Error(Errc::format, path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  if (!(cfg.dt > 0.0) || !(cfg.cart_mass > 0.0) || !(cfg.pole_mass > 0.0) || !(cfg.half_length > 0.0)) {
    throw Error(Errc::invalid_argument, "sim config: dt, masses and half_length must be positive");
  }
  return cfg;
}

const char* controller_kind_name(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::bang_bang: return "bang_bang";
    case ControllerKind::linear_feedback: return "linear_feedback";
    case ControllerKind::noisy_feedback: return "noisy_feedback";
  }
  return "?";
}

std::vector<ControllerSpec> default_controllers() {
  const std::vector<double> gains{0.1, 0.5, 10.0, 2.0};
  return {
      {ControllerKind::bang_bang, {}, 0.1, 0},
      {ControllerKind::noisy_feedback, gains, 0.4, 1},
      {ControllerKind::linear_feedback, gains, 0.45, 2},
  };
}

SystemState step_dynamics_force(const SystemState& s, double force, const SimConfig& cfg) {
  const double total_mass = cfg.cart_mass + cfg.pole_mass;
  const double polemass_length = cfg.pole_mass * cfg.half_length;
  const double sin_t = std::sin(s.pole_angle);
  const double cos_t = std::cos(s.pole_angle);

  const double temp = (force + polemass_length * s.pole_angvel * s.pole_angvel * sin_t) / total_mass;
  const double theta_acc = (cfg.gravity * sin_t - cos_t * temp) /
                           (cfg.half_length * (4.0 / 3.0 - cfg.pole_mass * cos_t * cos_t / total_mass));
  const double x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

  SystemState next{
      s.cart_pos + cfg.dt * s.cart_vel,
      s.cart_vel + cfg.dt * x_acc,
      s.pole_angle + cfg.dt * s.pole_angvel,
      s.pole_angvel + cfg.dt * theta_acc,
  };
  if (!std::isfinite(next.cart_pos) || !std::isfinite(next.cart_vel) || !std::isfinite(next.pole_angle) ||
      !std::isfinite(next.pole_angvel)) {
    throw Error(Errc::integration_blowup, "pole-cart integration produced a non-finite state (dt too large?)");
  }
  return next;
}

int safety_of_state(const SystemState& state) { return std::abs(state.pole_angle) <= kSafeAngle ? 1 : 0; }

double PoleGeometry::half_width() {
  // Pixel (u=1.5, d=4.5) enters the pole just past 6 degrees, which puts an
  // image change on the safety boundary.
  static const double hw = 1.5 * std::cos(kSafeAngle) - 4.5 * std::sin(kSafeAngle) - 1e-12;
  return hw;
}

int cart_pivot_column(double cart_pos) {
  const double center = 0.5 * Observation::kWidth + 4.0 * cart_pos;
  const double clamped = std::clamp(center, 5.0, static_cast<double>(Observation::kWidth - 5));
  return static_cast<int>(std::lround(clamped));
}

Observation render_observation(const SystemState& state) {
  Observation obs;
  obs.pixels.fill(1.0f);
  const int x0 = cart_pivot_column(state.cart_pos);
  const int pivot = static_cast<int>(PoleGeometry::pivot_row);

  for (int r = pivot; r < pivot + PoleGeometry::cart_rows; ++r) {
    for (int c = x0 - PoleGeometry::cart_half_width; c < x0 + PoleGeometry::cart_half_width; ++c) {
      obs.at(r, c) = 0.0f;
    }
  }

  const double sin_t = std::sin(state.pole_angle);
  const double cos_t = std::cos(state.pole_angle);
  const double hw = PoleGeometry::half_width();
  for (int r = 0; r < pivot; ++r) {
    const double d = PoleGeometry::pivot_row - (r + 0.5);
    for (int c = 0; c < Observation::kWidth; ++c) {
      const double u = c + 0.5 - x0;
      const double perp = u * cos_t - d * sin_t;
      const double along = u * sin_t + d * cos_t;
      if (std::abs(perp) < hw && along > 0.0 && along <= PoleGeometry::length) obs.at(r, c) = 0.0f;
    }
  }
  return obs;
}

Action choose_action(const ControllerSpec& controller, const SystemState& state, Rng& rng) {
  // Both draws are taken every step, even when the coin is unused.
  const bool random_action = bernoulli(rng, controller.noise_prob);
  const bool coin = bernoulli(rng, 0.5);
  if (random_action) return coin ? Action::right : Action::left;

  SystemState seen = state;
  if (controller.kind == ControllerKind::noisy_feedback) {
    seen.pole_angle += 0.02 * standard_normal(rng);
    seen.pole_angvel += 0.2 * standard_normal(rng);
  }
  double drive = 0.0;
  if (controller.kind == ControllerKind::bang_bang || controller.gains.size() < 4) {
    drive = seen.pole_angle;
  } else {
    const auto& g = controller.gains;
    drive = g[0] * seen.cart_pos + g[1] * seen.cart_vel + g[2] * seen.pole_angle + g[3] * seen.pole_angvel;
  }
  return drive > 0.0 ? Action::right : Action::left;
}

SystemState sample_initial_state(Rng& rng, const SimConfig& cfg) {
  SystemState s;
  s.cart_pos = uniform(rng, -cfg.init_spread, cfg.init_spread);
  s.cart_vel = uniform(rng, -cfg.init_spread, cfg.init_spread);
  s.pole_angle = uniform(rng, -cfg.init_spread, cfg.init_spread);
  s.pole_angvel = uniform(rng, -cfg.init_spread, cfg.init_spread);
  return s;
}

Trajectory run_episode(const ControllerSpec& controller, const SystemState& init, std::size_t max_len,
                       std::uint64_t seed, const SimConfig& cfg) {
  if (!(std::abs(init.pole_angle) <= kActivityAngle)) {
    throw Error(Errc::invalid_argument, "initial state outside the activity range");
  }
  if (controller.noise_prob < 0.0 || controller.noise_prob > 1.0) {
    throw Error(Errc::invalid_argument, "controller noise_prob must lie in [0, 1]");
  }
  Rng rng(seed);
  Trajectory traj;
  traj.controller_id = controller.id;
  traj.steps.reserve(max_len);
  SystemState state = init;
  for (std::size_t i = 0; i < max_len; ++i) {
    Step step;
    step.state = state;
    step.observation = std::make_shared<const Observation>(render_observation(state));
    step.action = choose_action(controller, state, rng);
    step.label = safety_of_state(state);
    traj.steps.push_back(std::move(step));
    state = step_dynamics(state, traj.steps.back().action, cfg);
    if (std::abs(state.pole_angle) > kActivityAngle) break;
  }
  return traj;
}

std::vector<Trajectory> run_episodes(std::span<const EpisodeJob> jobs, const SimConfig& cfg) {
  std::vector<Trajectory> out(jobs.size());
  parallel_for(static_cast<std::ptrdiff_t>(jobs.size()), [&](std::ptrdiff_t i) {
    const auto& job = jobs[static_cast<std::size_t>(i)];
    auto& traj = out[static_cast<std::size_t>(i)];
    traj = run_episode(job.controller, job.init, job.max_len, job.seed, cfg);
    traj.id = job.trajectory_id;
  });
  return out;
}

std::vector<Trajectory> run_episodes_serial(std::span<const EpisodeJob> jobs, const SimConfig& cfg) {
  std::vector<Trajectory> out;
  out.reserve(jobs.size());
  for (const auto& job : jobs) {
    out.push_back(run_episode(job.controller, job.init, job.max_len, job.seed, cfg));
    out.back().id = job.trajectory_id;
  }
  return out;
}

}  // namespace safepred
