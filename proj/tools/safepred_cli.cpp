#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "safepred/error.hpp"
#include "safepred/pipeline.hpp"

using namespace safepred;

namespace {

void add_common(CLI::App& app, RunConfig& cfg, std::string& out_dir) {
  app.add_option("--seed", cfg.seed, "Root seed");
  app.add_option("--out-dir", out_dir, "Output directory");
  app.add_option("--m", cfg.m, "Window length");
  app.add_option("--k", cfg.horizons, "Prediction horizons")->delimiter(',');
  app.add_option("--sets", cfg.sets, "Controller sets (specific, independent)")
      ->delimiter(',')
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, ControllerSet>{{"specific", ControllerSet::specific},
                                               {"independent", ControllerSet::independent}}));
  app.add_option("--kinds", cfg.kinds, "Predictor kinds")
      ->delimiter(',')
      ->transform(CLI::CheckedTransformer(std::map<std::string, PredictorKind>{
          {"monolithic", PredictorKind::monolithic},
          {"composite_image", PredictorKind::composite_image},
          {"composite_latent", PredictorKind::composite_latent}}));
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  std::string out_dir = cfg.out_dir.string();
  std::string sim_config;
  std::string rule = quantile_rule_name(cfg.rule);
  std::string evaluator = evaluator_choice_name(cfg.evaluator_choice);
  int epochs = -1;

  CLI::App app{"Calibrated safety prediction for an image-observed pole-cart"};
  app.set_config("--config", "", "INI-style key = value file with any of the options below");
  app.require_subcommand(1);
  add_common(app, cfg, out_dir);

  app.add_option("--windows", cfg.windows, "Windows per controller set (at the smallest horizon)");
  app.add_option("--episode-length", cfg.episode_length, "Maximum episode length");
  app.add_option("--controller", cfg.controller, "Controller id for controller-specific data (0, 1, 2)");
  app.add_option("--sim-config", sim_config, "Pole-cart constants file (key = value)");
  app.add_option("--evaluator", evaluator, "Composite evaluator: learned, augmented, robust_feature");
  app.add_option("--lambda1", cfg.lambda1, "KL weight of the autoencoder");
  app.add_option("--lambda2", cfg.lambda2, "Safety-loss weight of the autoencoder");
  app.add_option("--epochs", epochs, "Override max epochs for every training stage");
  app.add_option("--Q,--bins", cfg.Q, "Adaptive bins");
  app.add_option("--M,--resamples", cfg.M, "Conformal resamples per bin");
  app.add_option("--N,--resample-size", cfg.N, "Pairs per resample");
  app.add_option("--alpha", cfg.alpha, "Miscoverage level");
  app.add_option("--quantile-rule", rule, "Conformal rank rule: standard or paper");
  app.add_option("--coverage-trials", cfg.coverage_trials, "Trials per bin for empirical coverage");

  auto* simulate = app.add_subcommand("simulate", "Simulate episodes and write dataset splits");
  auto* train = app.add_subcommand("train", "Train predictors for every horizon");
  auto* calibrate = app.add_subcommand("calibrate", "Fit calibrators and conformal bounds");
  auto* evaluate = app.add_subcommand("evaluate", "Write metrics, reliability and coverage reports");
  for (auto* sub : {simulate, train, calibrate, evaluate}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(Errc::invalid_argument);
  }

  try {
    cfg.out_dir = out_dir;
    if (!sim_config.empty()) cfg.sim_config = sim_config;
    cfg.rule = parse_quantile_rule(rule);
    cfg.evaluator_choice = parse_evaluator_choice(evaluator);
    if (epochs >= 0) {
      for (auto* t : {&cfg.monolithic, &cfg.forecaster, &cfg.evaluator, &cfg.autoencoder, &cfg.latent_forecaster}) {
        t->max_epochs = epochs;
      }
    }
    if (simulate->parsed()) cmd_simulate(cfg, std::cout);
    else if (train->parsed()) cmd_train(cfg, std::cout);
    else if (calibrate->parsed()) cmd_calibrate(cfg, std::cout);
    else if (evaluate->parsed()) cmd_evaluate(cfg, std::cout);
  } catch (const Error& e) {
    std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
