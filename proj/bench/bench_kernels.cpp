// Serial reference vs OpenMP kernels: wall time and agreement.
#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "safepred/conformal.hpp"
#include "safepred/data.hpp"
#include "safepred/nets.hpp"
#include "safepred/predictors.hpp"
#include "safepred/rng.hpp"
#include "safepred/sim.hpp"

using namespace safepred;

namespace {

template <class Fn>
double best_of(int reps, Fn&& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

void row(const char* name, double serial, double parallel, bool agree) {
  std::printf("%-22s serial %9.4f s   parallel %9.4f s   speedup %5.2fx   %s\n", name, serial, parallel,
              serial / parallel, agree ? "agree" : "DISAGREE");
}

}  // namespace

int main(int argc, char** argv) {
  const int reps = argc > 1 ? std::stoi(argv[1]) : 3;
  std::printf("threads: %d, best of %d\n", omp_get_max_threads(), reps);

  // Episodes
  const SimConfig sim;
  std::vector<EpisodeJob> jobs;
  Rng rng(1);
  const auto ctrls = default_controllers();
  for (std::uint64_t i = 0; i < 256; ++i) {
    jobs.push_back({ctrls[i % 3], sample_initial_state(rng, sim), 300, derive_seed(1, "bench", i), i});
  }
  std::vector<Trajectory> par_traj, ser_traj;
  const double ep_s = best_of(reps, [&] { ser_traj = run_episodes_serial(jobs, sim); });
  const double ep_p = best_of(reps, [&] { par_traj = run_episodes(jobs, sim); });
  bool agree = par_traj.size() == ser_traj.size();
  for (std::size_t i = 0; agree && i < par_traj.size(); ++i) {
    agree = par_traj[i].size() == ser_traj[i].size() && par_traj[i].steps.back().state == ser_traj[i].steps.back().state;
  }
  row("run_episodes", ep_s, ep_p, agree);

  // Batch gradient of a monolithic-sized net
  std::vector<Trajectory> same_ctrl;
  for (std::size_t i = 0; i < par_traj.size(); i += 3) same_ctrl.push_back(par_traj[i]);
  const auto ds = build_dataset(same_ctrl, 5, 3, DatasetKind::obs_controller);
  std::vector<Example> examples;
  for (std::size_t i = 0; i < std::min<std::size_t>(ds.size(), 4096); ++i) {
    examples.push_back({encode_window(ds.samples[i].window, {}), one_hot_safety(ds.samples[i].label)});
  }
  const DenseNet net({5 * Observation::kPixels, 64, 2}, {Activation::relu, Activation::identity}, 2);
  std::vector<std::size_t> batch(examples.size());
  std::iota(batch.begin(), batch.end(), std::size_t{0});
  std::vector<double> gs(net.param_count()), gp(net.param_count());
  const double bg_s = best_of(reps, [&] { batch_gradient_serial(net, examples, batch, LossKind::ce, gs); });
  const double bg_p = best_of(reps, [&] { batch_gradient(net, examples, batch, LossKind::ce, gp); });
  double worst = 0.0;
  for (std::size_t i = 0; i < gs.size(); ++i) worst = std::max(worst, std::abs(gs[i] - gp[i]));
  row("batch_gradient", bg_s, bg_p, worst < 1e-10);

  // Scoring
  MonolithicPredictor mono{net, 5, 3, true};
  const LabelPredictor p = mono;
  std::vector<double> ss, sp;
  const double sc_s = best_of(reps, [&] { ss = predict_scores_serial(p, ds); });
  const double sc_p = best_of(reps, [&] { sp = predict_scores(p, ds); });
  row("predict_scores", sc_s, sc_p, ss == sp);

  // Conformal bounds
  std::vector<ScoredPair> pairs(100000);
  for (auto& q : pairs) {
    q.g = uniform01(rng);
    q.label = bernoulli(rng, q.g) ? 1 : 0;
  }
  const auto bv = adaptive_binning(pairs, 10);
  ConformalBounds bs, bp;
  const double cf_s = best_of(reps, [&] { bs = conformal_calibrate_serial(bv, 0.05, 200, 500, QuantileRule::standard, 3); });
  const double cf_p = best_of(reps, [&] { bp = conformal_calibrate(bv, 0.05, 200, 500, QuantileRule::standard, 3); });
  row("conformal_calibrate", cf_s, cf_p, bs.c == bp.c);
  return 0;
}
