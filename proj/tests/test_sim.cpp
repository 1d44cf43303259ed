#include <cmath>
#include <fstream>
#include <string>

#include "doctest.h"
#include "safepred/error.hpp"
#include "safepred/predictors.hpp"
#include "safepred/sim.hpp"

using namespace safepred;

namespace {

double deg(double d) { return d * std::numbers::pi / 180.0; }

int dark_count(const Observation& obs, int row_end) {
  int n = 0;
  for (int r = 0; r < row_end; ++r) {
    for (int c = 0; c < Observation::kWidth; ++c) n += obs.at(r, c) < 0.5f ? 1 : 0;
  }
  return n;
}

}  // namespace

TEST_SUITE("sim") {
  TEST_CASE("equilibrium is a fixed point") {
    const SimConfig cfg;
    CHECK(step_dynamics_force(SystemState{}, 0.0, cfg) == SystemState{});
    SimConfig fine = cfg;
    for (double dt : {0.001, 0.02, 0.5}) {
      fine.dt = dt;
      CHECK(step_dynamics_force(SystemState{}, 0.0, fine) == SystemState{});
    }
  }

  TEST_CASE("one step under full force matches hand integration") {
    const SimConfig cfg;
    const auto s = step_dynamics(SystemState{}, Action::right, cfg);
    // temp = 10 / 1.1; theta_acc = -temp / (0.5 (4/3 - 0.1 / 1.1)); x_acc = temp - 0.05 theta_acc / 1.1
    const double temp = 10.0 / 1.1;
    const double theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
    const double x_acc = temp - 0.05 * theta_acc / 1.1;
    CHECK(s.cart_pos == doctest::Approx(0.0));
    CHECK(s.cart_vel == doctest::Approx(0.02 * x_acc).epsilon(1e-12));
    CHECK(s.pole_angle == doctest::Approx(0.0));
    CHECK(s.pole_angvel == doctest::Approx(0.02 * theta_acc).epsilon(1e-12));
    CHECK(s.cart_vel == doctest::Approx(0.19512).epsilon(1e-4));
    CHECK(s.pole_angvel == doctest::Approx(-0.29268).epsilon(1e-4));
  }

  TEST_CASE("gravity pulls a tilted pole further over") {
    SystemState s;
    s.pole_angle = 0.05;
    CHECK(step_dynamics_force(s, 0.0, SimConfig{}).pole_angvel > 0.0);
  }

  TEST_CASE("step is bitwise deterministic") {
    SystemState s{0.3, -0.2, 0.07, 0.4};
    const SimConfig cfg;
    CHECK(step_dynamics(s, Action::left, cfg) == step_dynamics(s, Action::left, cfg));
  }

  TEST_CASE("non-finite state raises integration_blowup") {
    SystemState s;
    s.pole_angvel = std::numeric_limits<double>::infinity();
    try {
      (void)step_dynamics(s, Action::left, SimConfig{});
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::integration_blowup);
    }
  }

  TEST_CASE("safety is the closed six-degree interval") {
    SystemState s;
    CHECK(safety_of_state(s) == 1);
    s.pole_angle = deg(10.0);
    CHECK(safety_of_state(s) == 0);
    s.pole_angle = kSafeAngle;
    CHECK(safety_of_state(s) == 1);
    s.pole_angle = -kSafeAngle;
    CHECK(safety_of_state(s) == 1);
    for (int i = -4800; i <= 4800; ++i) {
      s.pole_angle = deg(i / 100.0);
      CHECK(safety_of_state(s) == (std::abs(s.pole_angle) <= kSafeAngle ? 1 : 0));
    }
  }

  TEST_CASE("upright centred render is left-right symmetric") {
    const auto obs = render_observation(SystemState{});
    for (int r = 0; r < Observation::kHeight; ++r) {
      for (int c = 0; c < Observation::kWidth; ++c) CHECK(obs.at(r, c) == obs.at(r, Observation::kWidth - 1 - c));
    }
  }

  TEST_CASE("opposite angles render as mirror images") {
    for (double a : {0.03, 0.1, 0.4, 0.8}) {
      SystemState p, n;
      p.pole_angle = a;
      n.pole_angle = -a;
      const auto op = render_observation(p), on = render_observation(n);
      bool mirrored = true;
      for (int r = 0; r < Observation::kHeight; ++r) {
        for (int c = 0; c < Observation::kWidth; ++c) mirrored = mirrored && op.at(r, c) == on.at(r, 31 - c);
      }
      CHECK(mirrored);
    }
  }

  TEST_CASE("render at theta 0.1 matches the golden grid") {
    std::ifstream in(std::string(SAFEPRED_GOLDEN_DIR) + "/render_theta_0p1.txt");
    REQUIRE(in.good());
    SystemState s;
    s.pole_angle = 0.1;
    const auto obs = render_observation(s);
    std::string line;
    for (int r = 0; r < Observation::kHeight; ++r) {
      REQUIRE(std::getline(in, line));
      REQUIRE(line.size() == static_cast<std::size_t>(Observation::kWidth));
      for (int c = 0; c < Observation::kWidth; ++c) CHECK((obs.at(r, c) < 0.5f) == (line[c] == '#'));
    }
  }

  TEST_CASE("pole pixel count tracks the rasterised area over the activity range") {
    const double area = PoleGeometry::length * 2.0 * PoleGeometry::half_width();
    for (int i = -48; i <= 48; ++i) {
      SystemState s;
      s.pole_angle = deg(i);
      const int n = dark_count(render_observation(s), static_cast<int>(PoleGeometry::pivot_row));
      CHECK(n >= 0.8 * area);
      CHECK(n <= 1.2 * area);
    }
  }

  TEST_CASE("pivot column is clamped so the cart stays in frame") {
    CHECK(cart_pivot_column(0.0) == 16);
    CHECK(cart_pivot_column(100.0) == 27);
    CHECK(cart_pivot_column(-100.0) == 5);
  }

  TEST_CASE("robust evaluator is exact on clean renders") {
    Rng rng = make_rng(4, "test/robust");
    for (int i = 0; i < 1000; ++i) {
      SystemState s;
      s.cart_pos = uniform(rng, -3.0, 3.0);
      s.pole_angle = -kActivityAngle + 2.0 * kActivityAngle * (i + 0.25) / 1000.0;
      CHECK(robust_evaluate(render_observation(s)) == safety_of_state(s));
    }
  }

  TEST_CASE("robust evaluator resolves the threshold to 1e-9 rad") {
    for (double cart : {-2.0, 0.0, 0.7}) {
      for (double sign : {-1.0, 1.0}) {
        SystemState s;
        s.cart_pos = cart;
        s.pole_angle = sign * kSafeAngle;
        CHECK(robust_evaluate(render_observation(s)) == 1);
        s.pole_angle = sign * (kSafeAngle + 1e-9);
        CHECK(robust_evaluate(render_observation(s)) == 0);
        s.pole_angle = sign * (kSafeAngle - 1e-9);
        CHECK(robust_evaluate(render_observation(s)) == 1);
      }
    }
  }

  TEST_CASE("stabilising feedback keeps the pole safe for the whole episode") {
    const ControllerSpec perfect{ControllerKind::linear_feedback, {0.1, 0.5, 10.0, 2.0}, 0.0, 9};
    const auto traj = run_episode(perfect, SystemState{}, 300, 1, SimConfig{});
    REQUIRE(traj.size() == 300);
    for (const auto& st : traj.steps) CHECK(st.label == 1);
  }

  TEST_CASE("random actions eventually produce an unsafe label") {
    const ControllerSpec random{ControllerKind::bang_bang, {}, 1.0, 0};
    const auto traj = run_episode(random, SystemState{}, 300, 2, SimConfig{});
    bool unsafe = false;
    for (const auto& st : traj.steps) unsafe = unsafe || st.label == 0;
    CHECK(unsafe);
  }

  TEST_CASE("episodes are seeded and labels match the stored states") {
    const auto ctrl = default_controllers()[1];
    const SimConfig cfg;
    const auto a = run_episode(ctrl, SystemState{0.01, 0, 0.02, 0}, 200, 77, cfg);
    const auto b = run_episode(ctrl, SystemState{0.01, 0, 0.02, 0}, 200, 77, cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.steps[i].state == b.steps[i].state);
      CHECK(a.steps[i].action == b.steps[i].action);
      CHECK(a.steps[i].label == safety_of_state(a.steps[i].state));
    }
  }

  TEST_CASE("episode starting outside the activity range is rejected") {
    SystemState s;
    s.pole_angle = deg(60.0);
    CHECK_THROWS_AS(run_episode(default_controllers()[0], s, 10, 0, SimConfig{}), Error);
  }

  TEST_CASE("parallel episodes equal the serial reference") {
    const SimConfig cfg;
    std::vector<EpisodeJob> jobs;
    Rng rng = make_rng(8, "test/jobs");
    const auto ctrls = default_controllers();
    for (std::uint64_t i = 0; i < 24; ++i) {
      jobs.push_back({ctrls[i % 3], sample_initial_state(rng, cfg), 150, derive_seed(8, "ep", i), i});
    }
    const auto par = run_episodes(jobs, cfg);
    const auto ser = run_episodes_serial(jobs, cfg);
    REQUIRE(par.size() == ser.size());
    for (std::size_t i = 0; i < par.size(); ++i) {
      REQUIRE(par[i].size() == ser[i].size());
      CHECK(par[i].id == i);
      for (std::size_t t = 0; t < par[i].size(); ++t) {
        CHECK(par[i].steps[t].state == ser[i].steps[t].state);
        CHECK(*par[i].steps[t].observation == *ser[i].steps[t].observation);
      }
    }
  }

  TEST_CASE("sim config file parsing") {
    const auto path = std::filesystem::temp_directory_path() / "safepred_simcfg.txt";
    {
      std::ofstream out(path);
      out << "# comment\ngravity = 9.81\ndt = 0.01\n";
    }
    const auto cfg = SimConfig::load(path);
    CHECK(cfg.gravity == doctest::Approx(9.81));
    CHECK(cfg.dt == doctest::Approx(0.01));
    CHECK(cfg.pole_mass == doctest::Approx(0.1));
    {
      std::ofstream out(path);
      out << "bogus = 1\n";
    }
    CHECK_THROWS_AS(SimConfig::load(path), Error);
    std::filesystem::remove(path);
  }
}
