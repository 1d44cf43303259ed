#include "safepred/pipeline.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "safepred/csv.hpp"
#include "safepred/error.hpp"
#include "safepred/rng.hpp"

namespace safepred {

namespace fs = std::filesystem;

namespace {

constexpr std::array<const char*, 4> kSplitNames{"train", "calib", "valid", "test"};
constexpr std::size_t kEpisodeBatch = 64;
constexpr std::size_t kMaxEpisodes = 1'000'000;

std::string set_stage(const char* stage, ControllerSet set) {
  return std::string(stage) + "/" + controller_set_name(set);
}

std::vector<ControllerSpec> set_controllers(const RunConfig& cfg, ControllerSet set) {
  auto all = default_controllers();
  if (set == ControllerSet::independent) return all;
  return {all.at(static_cast<std::size_t>(cfg.controller))};
}

std::size_t window_count(const Trajectory& t, int m, int k) {
  const auto need = static_cast<std::size_t>(m + k);
  return t.size() >= need ? t.size() - need + 1 : 0;
}

Dataset subset_by_ids(const Dataset& ds, const std::vector<std::uint64_t>& ids) {
  const std::unordered_set<std::uint64_t> keep(ids.begin(), ids.end());
  Dataset out;
  out.kind = ds.kind;
  out.m = ds.m;
  out.k = ds.k;
  out.controller_ids = ds.controller_ids;
  for (const auto& s : ds.samples) {
    if (keep.contains(s.trajectory_id)) out.samples.push_back(s);
  }
  return out;
}

void write_loss_csv(const std::vector<double>& history, const fs::path& path) {
  CsvTable table;
  table.header = {"epoch", "loss"};
  for (std::size_t e = 0; e < history.size(); ++e) table.rows.push_back({std::to_string(e), format_double(history[e])});
  write_csv(path, table);
}

fs::path models_dir(const RunConfig& cfg, ControllerSet set) {
  return cfg.out_dir / "models" / controller_set_name(set);
}

fs::path calib_prefix(const RunConfig& cfg, ControllerSet set, PredictorKind kind, int k) {
  return cfg.out_dir / "calib" / controller_set_name(set) /
         (std::string(predictor_kind_name(kind)) + "_k" + std::to_string(k));
}

fs::path with_suffix(const fs::path& prefix, const std::string& suffix) {
  return prefix.parent_path() / (prefix.filename().string() + suffix);
}

Dataset load_required(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::io, "missing dataset " + path.string() + " (run simulate first)");
  return load_dataset(path);
}

LabelPredictor load_bundle(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::io, "missing predictor bundle " + path.string() + " (run train first)");
  return load_predictor(path);
}

template <class T>
std::vector<T> deterministic_subset(std::vector<T> items, std::size_t cap, std::uint64_t seed) {
  if (items.size() <= cap) return items;
  Rng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_index(rng, i)]);
  items.resize(cap);
  return items;
}

TrainConfig seeded(TrainConfig c, std::uint64_t seed) {
  c.seed = seed;
  return c;
}

std::string fmt_fraction(std::size_t part, std::size_t total) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << (total ? static_cast<double>(part) / static_cast<double>(total) : 0.0);
  return os.str();
}

}  // namespace

const char* controller_set_name(ControllerSet set) {
  return set == ControllerSet::specific ? "specific" : "independent";
}

ControllerSet parse_controller_set(const std::string& name) {
  if (name == "specific") return ControllerSet::specific;
  if (name == "independent") return ControllerSet::independent;
  throw Error(Errc::invalid_argument, "controller set must be 'specific' or 'independent', got '" + name + "'");
}

const char* evaluator_choice_name(EvaluatorChoice e) {
  switch (e) {
    case EvaluatorChoice::learned: return "learned";
    case EvaluatorChoice::augmented: return "augmented";
    case EvaluatorChoice::robust_feature: return "robust_feature";
  }
  return "?";
}

EvaluatorChoice parse_evaluator_choice(const std::string& name) {
  if (name == "learned") return EvaluatorChoice::learned;
  if (name == "augmented") return EvaluatorChoice::augmented;
  if (name == "robust_feature") return EvaluatorChoice::robust_feature;
  throw Error(Errc::invalid_argument, "evaluator must be learned, augmented or robust_feature, got '" + name + "'");
}

void RunConfig::validate() const {
  if (m < 1) throw Error(Errc::invalid_argument, "m must be at least 1");
  if (horizons.empty()) throw Error(Errc::invalid_argument, "no horizons requested");
  for (int k : horizons) {
    if (k < 0) throw Error(Errc::invalid_argument, "horizons must be >= 0");
    if (static_cast<std::size_t>(m + k) > episode_length) {
      throw Error(Errc::trajectory_too_short, "m + k = " + std::to_string(m + k) + " exceeds the episode length " +
                                                  std::to_string(episode_length));
    }
  }
  if (windows < 1) throw Error(Errc::invalid_argument, "windows must be positive");
  if (controller < 0 || controller >= static_cast<int>(default_controllers().size())) {
    throw Error(Errc::invalid_argument, "controller must be one of 0, 1, 2");
  }
  if (sets.empty()) throw Error(Errc::invalid_argument, "no controller sets requested");
  split.validate();
  if (Q < 1) throw Error(Errc::invalid_argument, "Q must be at least 1");
  if (M < 1 || N < 1) throw Error(Errc::invalid_argument, "M and N must be at least 1");
  if (!(alpha > 0.0 && alpha < 0.5)) throw Error(Errc::invalid_argument, "alpha must lie in (0, 0.5)");
  if (coverage_trials < 1) throw Error(Errc::invalid_argument, "coverage trials must be at least 1");
  for (const auto* t : {&monolithic, &forecaster, &evaluator, &autoencoder, &latent_forecaster}) t->validate();
}

SimConfig RunConfig::sim() const { return sim_config ? SimConfig::load(*sim_config) : SimConfig{}; }

SetData simulate_set(const RunConfig& cfg, ControllerSet set) {
  cfg.validate();
  const auto sim = cfg.sim();
  const auto controllers = set_controllers(cfg, set);
  const int k_min = *std::min_element(cfg.horizons.begin(), cfg.horizons.end());
  SetData data;
  std::size_t windows = 0;
  std::uint64_t next_id = 0;
  while (windows < cfg.windows) {
    if (next_id >= kMaxEpisodes) {
      throw Error(Errc::trajectory_too_short, "episodes are too short to yield the requested windows");
    }
    std::vector<EpisodeJob> jobs;
    for (std::size_t b = 0; b < kEpisodeBatch; ++b, ++next_id) {
      EpisodeJob job;
      job.controller = controllers[next_id % controllers.size()];
      Rng init_rng = make_rng(cfg.seed, set_stage("init", set), next_id);
      job.init = sample_initial_state(init_rng, sim);
      job.max_len = cfg.episode_length;
      job.seed = derive_seed(cfg.seed, set_stage("episode", set), next_id);
      job.trajectory_id = next_id;
      jobs.push_back(job);
    }
    for (auto& traj : run_episodes(jobs, sim)) {
      if (windows >= cfg.windows) break;
      windows += window_count(traj, cfg.m, k_min);
      data.trajectories.push_back(std::move(traj));
    }
  }
  std::vector<std::uint64_t> ids;
  for (const auto& t : data.trajectories) ids.push_back(t.id);
  SplitSpec spec = cfg.split;
  spec.seed = derive_seed(cfg.seed, set_stage("split", set));
  data.split_ids = split_trajectory_ids(ids, spec);
  return data;
}

DatasetSplits build_splits(const RunConfig& cfg, ControllerSet set, const SetData& data, int k) {
  std::vector<Trajectory> usable;
  for (const auto& t : data.trajectories) {
    if (window_count(t, cfg.m, k) > 0) usable.push_back(t);
  }
  const auto kind = set == ControllerSet::specific ? DatasetKind::obs_controller : DatasetKind::obs_action;
  const auto ds = build_dataset(usable, cfg.m, k, kind);
  DatasetSplits out{subset_by_ids(ds, data.split_ids[0]), subset_by_ids(ds, data.split_ids[1]),
                    subset_by_ids(ds, data.split_ids[2]), subset_by_ids(ds, data.split_ids[3])};
  const std::array<const Dataset*, 4> parts{&out.train, &out.calib, &out.valid, &out.test};
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i]->empty()) {
      throw Error(Errc::empty_split, std::string("split ") + kSplitNames[i] + " is empty at k = " + std::to_string(k));
    }
  }
  return out;
}

Dataset rebalanced(const RunConfig& cfg, const Dataset& ds, ControllerSet set, const std::string& split) {
  return rebalance(ds, derive_seed(cfg.seed, "rebalance/" + std::string(controller_set_name(set)) + "/" + split,
                                   static_cast<std::uint64_t>(ds.k)));
}

fs::path dataset_path(const RunConfig& cfg, ControllerSet set, int k, const std::string& split) {
  return cfg.out_dir / "data" / controller_set_name(set) / ("k" + std::to_string(k)) / (split + ".jsonl");
}

fs::path bundle_path(const RunConfig& cfg, ControllerSet set, PredictorKind kind, int k) {
  return models_dir(cfg, set) / (std::string(predictor_kind_name(kind)) + "_k" + std::to_string(k) + ".json");
}

std::string predictor_label(ControllerSet set, PredictorKind kind) {
  return std::string(predictor_kind_name(kind)) + "-" + controller_set_name(set);
}

std::vector<int> labels_of(const Dataset& ds) {
  std::vector<int> labels;
  labels.reserve(ds.size());
  for (const auto& s : ds.samples) labels.push_back(s.label);
  return labels;
}

CalibrationResult calibrate_scores(const RunConfig& cfg, std::span<const double> calib_scores,
                                   std::span<const int> calib_labels, std::span<const double> valid_scores,
                                   std::span<const int> valid_labels, std::uint64_t seed) {
  CalibrationResult r;
  const auto candidates = fit_all(calib_scores, calib_labels, cfg.Q);
  r.selection = select_min_ece(candidates, calib_scores, calib_labels, cfg.Q);
  const auto calibrated = r.selection.chosen.apply(valid_scores);
  const auto bv = adaptive_binning(make_pairs(calibrated, valid_labels), cfg.Q);
  r.standard = conformal_calibrate(bv, cfg.alpha, cfg.M, cfg.N, QuantileRule::standard, seed);
  r.paper = conformal_calibrate(bv, cfg.alpha, cfg.M, cfg.N, QuantileRule::paper, seed);
  return r;
}

void cmd_simulate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  for (auto set : cfg.sets) {
    const auto data = simulate_set(cfg, set);
    log << "simulate " << controller_set_name(set) << ": " << data.trajectories.size() << " episodes\n";
    for (int k : cfg.horizons) {
      const auto splits = build_splits(cfg, set, data, k);
      const std::array<const Dataset*, 4> parts{&splits.train, &splits.calib, &splits.valid, &splits.test};
      log << "  k=" << k;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        save_dataset(*parts[i], dataset_path(cfg, set, k, kSplitNames[i]));
        const auto counts = parts[i]->class_counts();
        log << "  " << kSplitNames[i] << " n=" << parts[i]->size() << " safe=" << fmt_fraction(counts[1], parts[i]->size());
      }
      log << '\n';
    }
  }
}

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto wants = [&](PredictorKind k) { return std::find(cfg.kinds.begin(), cfg.kinds.end(), k) != cfg.kinds.end(); };
  std::size_t failures = 0;
  for (auto set : cfg.sets) {
    const std::string set_name = controller_set_name(set);
    const auto dir = models_dir(cfg, set);

    if (wants(PredictorKind::monolithic)) {
      for (int k : cfg.horizons) {
        const auto train = rebalanced(cfg, load_required(dataset_path(cfg, set, k, "train")), set, "train");
        try {
          std::vector<double> history;
          auto p = train_monolithic(train, seeded(cfg.monolithic, derive_seed(cfg.seed, "monolithic/" + set_name, k)),
                                    cfg.arch, &history);
          save_predictor(LabelPredictor{std::move(p)}, bundle_path(cfg, set, PredictorKind::monolithic, k));
          write_loss_csv(history, dir / ("monolithic_k" + std::to_string(k) + "_loss.csv"));
          log << "train monolithic " << set_name << " k=" << k << ": " << history.size()
              << " epochs, final loss " << (history.empty() ? 0.0 : history.back()) << '\n';
        } catch (const Error& e) {
          if (e.code() != Errc::divergence) throw;
          ++failures;
          log << "train monolithic " << set_name << " k=" << k << " failed: " << e.what() << '\n';
        }
      }
    }

    const bool image = wants(PredictorKind::composite_image), latent = wants(PredictorKind::composite_latent);
    if (!image && !latent) continue;
    try {
      // One-step forecasters and the evaluator do not depend on k; one set of
      // components serves every horizon.
      const auto base = load_required(dataset_path(cfg, set, cfg.horizons.front(), "train"));
      const auto frames = labelled_frames(base);
      const auto eval_images =
          deterministic_subset(frames, cfg.max_evaluator_images, derive_seed(cfg.seed, "evaluator-images/" + set_name));
      std::vector<double> history;

      Evaluator learned;
      if (cfg.evaluator_choice != EvaluatorChoice::robust_feature || latent) {
        const bool aug = cfg.evaluator_choice == EvaluatorChoice::augmented;
        learned = train_evaluator(eval_images, aug, seeded(cfg.evaluator, derive_seed(cfg.seed, "evaluator/" + set_name)),
                                  cfg.arch, &history);
        write_loss_csv(history, dir / "evaluator_loss.csv");
        log << "train evaluator " << set_name << (aug ? " (augmented)" : "") << ": " << history.size() << " epochs\n";
      }
      const Evaluator evaluator = cfg.evaluator_choice == EvaluatorChoice::robust_feature ? Evaluator{} : learned;

      if (image) {
        auto f = train_image_forecaster(base, seeded(cfg.forecaster, derive_seed(cfg.seed, "image-forecaster/" + set_name)),
                                        cfg.arch, &history);
        write_loss_csv(history, dir / "image_forecaster_loss.csv");
        log << "train image forecaster " << set_name << ": " << history.size() << " epochs\n";
        for (int k : cfg.horizons) {
          CompositeImagePredictor p{f, evaluator, k, set == ControllerSet::specific};
          save_predictor(LabelPredictor{std::move(p)}, bundle_path(cfg, set, PredictorKind::composite_image, k));
        }
      }
      if (latent) {
        const auto ae_images = deterministic_subset(frames, cfg.max_autoencoder_images,
                                                    derive_seed(cfg.seed, "autoencoder-images/" + set_name));
        auto ae = train_autoencoder(ae_images, learned, cfg.lambda1, cfg.lambda2,
                                    seeded(cfg.autoencoder, derive_seed(cfg.seed, "autoencoder/" + set_name)), cfg.arch,
                                    &history);
        write_loss_csv(history, dir / "autoencoder_loss.csv");
        log << "train autoencoder " << set_name << ": " << history.size() << " epochs\n";
        auto f = train_latent_forecaster(
            base, ae, seeded(cfg.latent_forecaster, derive_seed(cfg.seed, "latent-forecaster/" + set_name)), cfg.arch,
            &history);
        write_loss_csv(history, dir / "latent_forecaster_loss.csv");
        log << "train latent forecaster " << set_name << ": " << history.size() << " epochs\n";
        for (int k : cfg.horizons) {
          CompositeLatentPredictor p{ae, f, evaluator, k, set == ControllerSet::specific};
          save_predictor(LabelPredictor{std::move(p)}, bundle_path(cfg, set, PredictorKind::composite_latent, k));
        }
      }
    } catch (const Error& e) {
      if (e.code() != Errc::divergence) throw;
      ++failures;
      log << "train composite " << set_name << " failed: " << e.what() << '\n';
    }
  }
  if (failures > 0) throw Error(Errc::divergence, std::to_string(failures) + " model(s) diverged; see log");
}

void cmd_calibrate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  for (auto set : cfg.sets) {
    for (int k : cfg.horizons) {
      const auto calib = rebalanced(cfg, load_required(dataset_path(cfg, set, k, "calib")), set, "calib");
      const auto valid = rebalanced(cfg, load_required(dataset_path(cfg, set, k, "valid")), set, "valid");
      const auto calib_labels = labels_of(calib), valid_labels = labels_of(valid);
      for (auto kind : cfg.kinds) {
        const auto predictor = load_bundle(bundle_path(cfg, set, kind, k));
        const auto seed = derive_seed(cfg.seed, "conformal/" + predictor_label(set, kind), static_cast<std::uint64_t>(k));
        const auto r = calibrate_scores(cfg, predict_scores(predictor, calib), calib_labels,
                                        predict_scores(predictor, valid), valid_labels, seed);
        const auto prefix = calib_prefix(cfg, set, kind, k);
        save_calibrator(r.selection.chosen, with_suffix(prefix, "_calibrator.json"));
        save_selection_csv(r.selection, with_suffix(prefix, "_selection.csv"));
        save_bounds_csv(r.standard, with_suffix(prefix, "_bounds_standard.csv"));
        save_bounds_csv(r.paper, with_suffix(prefix, "_bounds_paper.csv"));
        log << "calibrate " << predictor_label(set, kind) << " k=" << k << ": "
            << calibrator_kind_name(r.selection.chosen.kind) << '\n';
      }
    }
  }
}

void cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  std::vector<MetricsRow> metrics;
  CsvTable coverage;
  coverage.header = {"predictor", "k", "rule", "coverage", "min_bin_coverage", "trials"};
  const auto reports = cfg.out_dir / "reports";
  for (auto set : cfg.sets) {
    for (int k : cfg.horizons) {
      const auto test = rebalanced(cfg, load_required(dataset_path(cfg, set, k, "test")), set, "test");
      const auto labels = labels_of(test);
      for (auto kind : cfg.kinds) {
        const auto name = predictor_label(set, kind);
        const auto predictor = load_bundle(bundle_path(cfg, set, kind, k));
        const auto prefix = calib_prefix(cfg, set, kind, k);
        const auto cal_path = with_suffix(prefix, "_calibrator.json");
        if (!fs::exists(cal_path)) throw Error(Errc::io, "missing calibrator " + cal_path.string() + " (run calibrate)");
        const auto calibrator = load_calibrator(cal_path);
        const std::array<ConformalBounds, 2> bounds{load_bounds_csv(with_suffix(prefix, "_bounds_standard.csv")),
                                                    load_bounds_csv(with_suffix(prefix, "_bounds_paper.csv"))};

        const auto raw = predict_scores(predictor, test);
        const auto calibrated = calibrator.apply(raw);
        for (const auto* scores : {&raw, &calibrated}) {
          std::vector<int> pred(scores->size());
          std::transform(scores->begin(), scores->end(), pred.begin(), [](double s) { return s > 0.5 ? 1 : 0; });
          const auto em = ece_mce(*scores, labels, cfg.Q);
          const bool is_raw = scores == &raw;
          metrics.push_back({name, k, "test", is_raw ? "none" : calibrator_kind_name(calibrator.kind),
                             f1_score(pred, labels), false_positive_rate(pred, labels), em.ece, em.mce, labels.size()});
        }
        const auto& primary = bounds[cfg.rule == QuantileRule::standard ? 0 : 1];
        const auto stem = name + "_k" + std::to_string(k);
        write_reliability_csv(reliability_data(raw, labels, cfg.Q), reports / "reliability" / (stem + "_uncalibrated.csv"));
        write_reliability_csv(reliability_data(calibrated, labels, cfg.Q, &primary),
                              reports / "reliability" / (stem + "_calibrated.csv"));

        const auto fresh = make_pairs(calibrated, labels);
        for (std::size_t r = 0; r < bounds.size(); ++r) {
          const auto rule = r == 0 ? QuantileRule::standard : QuantileRule::paper;
          const auto rep = empirical_coverage(bounds[r], fresh, cfg.coverage_trials, cfg.N,
                                              derive_seed(cfg.seed, "coverage/" + name + "/" + quantile_rule_name(rule),
                                                          static_cast<std::uint64_t>(k)));
          coverage.rows.push_back({name, std::to_string(k), quantile_rule_name(rule), format_double(rep.overall),
                                   format_double(*std::min_element(rep.per_bin.begin(), rep.per_bin.end())),
                                   std::to_string(rep.trials)});
        }
        const auto& last = metrics.back();
        log << "evaluate " << name << " k=" << k << ": f1 " << last.f1 << " ece " << metrics[metrics.size() - 2].ece
            << " -> " << last.ece << '\n';
      }
    }
  }
  write_metrics_csv(metrics, reports / "metrics.csv");
  write_csv(reports / "coverage.csv", coverage);
}

}  // namespace safepred
