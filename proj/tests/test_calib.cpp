#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "safepred/calib.hpp"
#include "safepred/csv.hpp"
#include "safepred/error.hpp"
#include "safepred/metrics.hpp"
#include "safepred/rng.hpp"

using namespace safepred;

namespace {

struct Synthetic {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Labels drawn as Bernoulli(truth(score)).
template <class Truth>
Synthetic synthetic(std::size_t n, std::uint64_t seed, Truth truth) {
  Rng rng(seed);
  Synthetic out;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = uniform(rng, 0.01, 0.99);
    out.scores.push_back(s);
    out.labels.push_back(bernoulli(rng, truth(s)) ? 1 : 0);
  }
  return out;
}

Synthetic calibrated(std::size_t n, std::uint64_t seed) {
  return synthetic(n, seed, [](double s) { return s; });
}

template <class Fn>
void expect_single_class(Fn fn) {
  try {
    fn();
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::single_class);
  }
}

// Minimal least-squares nondecreasing fit by enumerating pooled partitions.
std::vector<double> brute_force(const std::vector<double>& y) {
  const std::size_t n = y.size();
  std::vector<double> best;
  double best_sse = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 0; mask < (1u << (n - 1)); ++mask) {
    std::vector<double> fit(n), means;
    std::size_t start = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i + 1 != n && !(mask >> i & 1u)) continue;
      double s = 0.0;
      for (std::size_t j = start; j <= i; ++j) s += y[j];
      const double mean = s / static_cast<double>(i - start + 1);
      means.push_back(mean);
      for (std::size_t j = start; j <= i; ++j) fit[j] = mean;
      start = i + 1;
    }
    if (!std::is_sorted(means.begin(), means.end())) continue;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) sse += (fit[i] - y[i]) * (fit[i] - y[i]);
    if (sse < best_sse) {
      best_sse = sse;
      best = fit;
    }
  }
  return best;
}

}  // namespace

TEST_SUITE("calib") {
  TEST_CASE("platt on calibrated scores is close to the identity") {
    const auto d = calibrated(10000, 1);
    const auto cal = fit_platt(d.scores, d.labels);
    REQUIRE(cal.params.size() == 2);
    CHECK(cal.params[0] == doctest::Approx(1.0).epsilon(0.1));
    CHECK(std::abs(cal.params[1]) < 0.1);
    double prev = -1.0;
    for (int i = 1; i < 1000; ++i) {
      const double y = cal.apply(i / 1000.0);
      CHECK(y > prev);
      prev = y;
    }
  }

  TEST_CASE("platt needs both classes") {
    const std::vector<double> s{0.2, 0.5, 0.7};
    const std::vector<int> ones{1, 1, 1};
    expect_single_class([&] { (void)fit_platt(s, ones); });
  }

  TEST_CASE("temperature recovers one for calibrated logits") {
    Rng rng(2);
    std::vector<std::array<double, 2>> logits;
    std::vector<int> labels;
    for (int i = 0; i < 20000; ++i) {
      const double d = 2.0 * standard_normal(rng);
      logits.push_back({d, 0.0});
      labels.push_back(bernoulli(rng, sigmoid(d)) ? 1 : 0);
    }
    const auto cal = fit_temperature(logits, labels);
    CHECK(cal.params.at(0) == doctest::Approx(1.0).epsilon(0.05));
  }

  TEST_CASE("temperature recovers two for overconfident logits") {
    Rng rng(3);
    std::vector<std::array<double, 2>> logits;
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 20000; ++i) {
      const double d = 3.0 * standard_normal(rng);
      logits.push_back({0.5 * d, -0.5 * d});
      scores.push_back(sigmoid(d));
      labels.push_back(bernoulli(rng, sigmoid(d / 2.0)) ? 1 : 0);
    }
    const auto cal = fit_temperature(logits, labels);
    CHECK(cal.params.at(0) == doctest::Approx(2.0).epsilon(0.1));
    const auto from_scores = fit_temperature(scores, labels);
    CHECK(from_scores.params.at(0) == doctest::Approx(2.0).epsilon(0.1));
  }

  TEST_CASE("temperature never flips the argmax") {
    Rng rng(4);
    for (double T : {0.05, 0.5, 1.0, 3.0, 20.0}) {
      Calibrator cal{CalibratorKind::temperature, {T}, {}, {}};
      for (int i = 0; i < 200; ++i) {
        const std::array<double, 2> l{uniform(rng, -5, 5), uniform(rng, -5, 5)};
        if (l[0] == l[1]) continue;
        CHECK((apply_temperature(cal, l) > 0.5) == (l[0] > l[1]));
      }
    }
  }

  TEST_CASE("histogram binning example") {
    const std::vector<double> s{0.1, 0.1, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.9, 0.9};
    const std::vector<int> y{0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    const auto cal = fit_histogram(s, y, 2);
    CHECK(cal.apply(0.1) == 0.0);
    CHECK(cal.apply(0.9) == 1.0);
  }

  TEST_CASE("histogram with constant labels is constant") {
    const auto d = calibrated(200, 5);
    const std::vector<int> ones(200, 1);
    const auto cal = fit_histogram(d.scores, ones, 10);
    for (int i = 0; i <= 100; ++i) CHECK(cal.apply(i / 100.0) == 1.0);
  }

  TEST_CASE("histogram needs at least Q scores") {
    const std::vector<double> s{0.1, 0.2};
    const std::vector<int> y{0, 1};
    try {
      (void)fit_histogram(s, y, 5);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::insufficient_data);
    }
  }

  TEST_CASE("isotonic pools the violator") {
    const std::vector<double> s{0.2, 0.4, 0.6};
    const std::vector<int> y{1, 0, 1};
    const auto cal = fit_isotonic(s, y);
    CHECK(cal.apply(0.2) == doctest::Approx(0.5));
    CHECK(cal.apply(0.4) == doctest::Approx(0.5));
    CHECK(cal.apply(0.6) == doctest::Approx(1.0));
    const std::vector<double> y3{1.0, 0.0, 1.0};
    CHECK(pava(y3) == brute_force(y3));
  }

  TEST_CASE("pava leaves monotone data alone and constants constant") {
    const std::vector<double> mono{0.0, 0.0, 1.0, 1.0};
    CHECK(pava(mono) == mono);
    const std::vector<double> flat(6, 0.3);
    for (double v : pava(flat)) CHECK(v == doctest::Approx(0.3));
  }

  TEST_CASE("pava matches brute force on random instances") {
    Rng rng(6);
    for (int t = 0; t < 300; ++t) {
      std::vector<double> y(1 + uniform_index(rng, 8));
      for (auto& v : y) v = t % 2 ? uniform01(rng) : static_cast<double>(uniform_index(rng, 2));
      const auto a = pava(y), b = brute_force(y);
      for (std::size_t i = 0; i < y.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("weighted pava pools by weight") {
    const std::vector<double> y{1.0, 0.0};
    const std::vector<double> w{3.0, 1.0};
    const auto fit = pava(y, w);
    CHECK(fit[0] == doctest::Approx(0.75));
    CHECK(fit[1] == doctest::Approx(0.75));
  }

  TEST_CASE("isotonic pools tied scores before fitting") {
    const std::vector<double> s{0.5, 0.5, 0.5, 0.5};
    const std::vector<int> y{1, 0, 1, 1};
    const auto cal = fit_isotonic(s, y);
    CHECK(cal.apply(0.5) == doctest::Approx(0.75));
  }

  TEST_CASE("beta on calibrated scores is close to the identity") {
    const auto d = calibrated(20000, 7);
    const auto cal = fit_beta(d.scores, d.labels);
    for (int i = 10; i <= 90; ++i) CHECK(std::abs(cal.apply(i / 100.0) - i / 100.0) < 0.05);
    CHECK(cal.params.at(0) >= 0.0);
    CHECK(cal.params.at(1) >= 0.0);
  }

  TEST_CASE("beta needs both classes") {
    const std::vector<double> s{0.2, 0.5, 0.7};
    const std::vector<int> zeros{0, 0, 0};
    expect_single_class([&] { (void)fit_beta(s, zeros); });
  }

  TEST_CASE("every fitted calibrator maps into [0, 1] monotonically") {
    for (std::uint64_t seed : {8u, 9u, 10u}) {
      const auto d = synthetic(3000, seed, [&](double s) { return std::pow(s, 0.5 + seed % 3); });
      const auto all = fit_all(d.scores, d.labels, 10);
      CHECK(all.size() == 5);
      Rng rng(seed);
      for (const auto& cal : all) {
        for (int i = 0; i < 10000; ++i) {
          const double y = cal.apply(uniform01(rng));
          CHECK(y >= 0.0);
          CHECK(y <= 1.0);
        }
        double prev = -1.0;
        for (int i = 0; i <= 2000; ++i) {
          const double y = cal.apply(i / 2000.0);
          CHECK(y >= prev);
          prev = y;
        }
      }
    }
  }

  TEST_CASE("fit_all skips kinds that cannot fit a single class") {
    const std::vector<double> s{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
    const std::vector<int> ones(10, 1);
    const auto all = fit_all(s, ones, 2);
    for (const auto& cal : all) {
      CHECK(cal.kind != CalibratorKind::platt);
      CHECK(cal.kind != CalibratorKind::beta);
    }
    CHECK(!all.empty());
  }

  TEST_CASE("selection prefers the identity-like candidate") {
    const auto d = calibrated(5000, 11);
    const std::vector<Calibrator> cands{Calibrator{CalibratorKind::temperature, {5.0}, {}, {}},
                                        fit_platt(d.scores, d.labels)};
    const auto sel = select_min_ece(cands, d.scores, d.labels, 10);
    CHECK(sel.chosen.kind == CalibratorKind::platt);
    CHECK(sel.ece.size() == 2);
  }

  TEST_CASE("selection with one candidate returns it") {
    const auto d = calibrated(500, 12);
    const std::vector<Calibrator> one{Calibrator{CalibratorKind::beta, {2.0, 0.5, 0.1}, {}, {}}};
    CHECK(select_min_ece(one, d.scores, d.labels, 10).chosen == one[0]);
  }

  TEST_CASE("selection ties follow the kind order") {
    const auto d = calibrated(500, 13);
    const std::vector<Calibrator> cands{Calibrator{CalibratorKind::platt, {1.0, 0.0}, {}, {}},
                                        Calibrator{CalibratorKind::temperature, {1.0}, {}, {}}};
    const auto sel = select_min_ece(cands, d.scores, d.labels, 10);
    CHECK(sel.ece[0].second == sel.ece[1].second);
    CHECK(sel.chosen.kind == CalibratorKind::temperature);
    CHECK(calibrator_tie_rank(CalibratorKind::isotonic) < calibrator_tie_rank(CalibratorKind::temperature));
    CHECK(calibrator_tie_rank(CalibratorKind::temperature) < calibrator_tie_rank(CalibratorKind::platt));
    CHECK(calibrator_tie_rank(CalibratorKind::platt) < calibrator_tie_rank(CalibratorKind::beta));
    CHECK(calibrator_tie_rank(CalibratorKind::beta) < calibrator_tie_rank(CalibratorKind::histogram));
  }

  TEST_CASE("calibrators round-trip through json and files") {
    const auto d = calibrated(1000, 14);
    const auto path = std::filesystem::temp_directory_path() / "safepred_test_cal.json";
    for (const auto& cal : fit_all(d.scores, d.labels, 10)) {
      CHECK(Calibrator::from_json(cal.to_json()) == cal);
      save_calibrator(cal, path);
      CHECK(load_calibrator(path) == cal);
      CHECK(parse_calibrator_kind(calibrator_kind_name(cal.kind)) == cal.kind);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("selection csv lists every candidate") {
    const auto d = calibrated(1000, 15);
    const auto all = fit_all(d.scores, d.labels, 10);
    const auto sel = select_min_ece(all, d.scores, d.labels, 10);
    const auto path = std::filesystem::temp_directory_path() / "safepred_test_sel.csv";
    save_selection_csv(sel, path);
    const auto table = read_csv(path);
    CHECK(table.header == std::vector<std::string>{"kind", "ece", "chosen"});
    CHECK(table.rows.size() == all.size());
    std::filesystem::remove(path);
  }
}
