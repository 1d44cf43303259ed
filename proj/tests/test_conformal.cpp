#include <filesystem>

#include "doctest.h"
#include "safepred/conformal.hpp"
#include "safepred/error.hpp"
#include "safepred/rng.hpp"

using namespace safepred;

namespace {

std::vector<ScoredPair> well_specified(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ScoredPair> out(n);
  for (auto& p : out) {
    p.g = uniform01(rng);
    p.label = bernoulli(rng, p.g) ? 1 : 0;
  }
  return out;
}

ConformalBounds flat_bounds(int Q, double c) {
  ConformalBounds b;
  for (int j = 0; j < Q; ++j) {
    b.c.push_back(c);
    b.ranges.push_back({static_cast<double>(j) / Q, (j + 1.0) / Q});
  }
  return b;
}

}  // namespace

TEST_SUITE("conformal") {
  TEST_CASE("equal-count bins with the top remainder dropped") {
    const auto p100 = well_specified(100, 1);
    const auto b100 = adaptive_binning(p100, 10);
    CHECK(b100.Q() == 10);
    CHECK(b100.dropped == 0);
    for (const auto& bin : b100.bins) CHECK(bin.size() == 10);

    const auto p105 = well_specified(105, 2);
    const auto b105 = adaptive_binning(p105, 10);
    CHECK(b105.dropped == 5);
    for (const auto& bin : b105.bins) CHECK(bin.size() == 10);
    double kept_max = 0.0;
    for (const auto& bin : b105.bins) {
      for (const auto& p : bin) kept_max = std::max(kept_max, p.g);
    }
    int above = 0;
    for (const auto& p : p105) above += p.g > kept_max ? 1 : 0;
    CHECK(above == 5);
  }

  TEST_CASE("bins follow score order") {
    const std::vector<ScoredPair> pairs{{0.9, 1}, {0.1, 0}, {0.5, 1}};
    const auto bv = adaptive_binning(pairs, 3);
    CHECK(bv.bins[0][0].g == 0.1);
    CHECK(bv.bins[1][0].g == 0.5);
    CHECK(bv.bins[2][0].g == 0.9);
    CHECK(bv.ranges[1].lo == 0.5);
    CHECK(bv.ranges[1].hi == 0.5);
  }

  TEST_CASE("ties keep their input order") {
    const std::vector<ScoredPair> pairs{{0.5, 1}, {0.5, 0}, {0.5, 1}, {0.5, 0}};
    const auto bv = adaptive_binning(pairs, 2);
    CHECK(bv.bins[0][0].label == 1);
    CHECK(bv.bins[0][1].label == 0);
  }

  TEST_CASE("too few pairs for the bins") {
    CHECK_THROWS_AS(adaptive_binning(well_specified(3, 3), 5), Error);
  }

  TEST_CASE("quantile ranks") {
    CHECK(conformal_quantile_index(200, 0.05, QuantileRule::paper) == 96);
    CHECK(conformal_quantile_index(200, 0.05, QuantileRule::standard) == 191);
    CHECK(conformal_quantile_index(5, 0.05, QuantileRule::standard) == 5);
    try {
      (void)conformal_quantile_index(1, 0.05, QuantileRule::paper);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::quantile_out_of_range);
      CHECK(std::string(e.what()).find("need M >= 38") != std::string::npos);
    }
    CHECK_THROWS_AS(conformal_quantile_index(200, 0.6, QuantileRule::standard), Error);
    CHECK_THROWS_AS(conformal_quantile_index(200, 0.0, QuantileRule::standard), Error);
  }

  TEST_CASE("degenerate bin gives a zero bound") {
    BinnedValidation bv;
    bv.bins = {std::vector<ScoredPair>(50, ScoredPair{1.0, 1})};
    bv.ranges = {{1.0, 1.0}};
    const auto b = conformal_calibrate(bv, 0.05, 200, 500, QuantileRule::standard, 4);
    CHECK(b.c == std::vector<double>{0.0});
  }

  TEST_CASE("bounds lie in [0, 1] and are seeded") {
    const auto bv = adaptive_binning(well_specified(5000, 5), 10);
    const auto a = conformal_calibrate(bv, 0.05, 200, 500, QuantileRule::standard, 6);
    const auto b = conformal_calibrate(bv, 0.05, 200, 500, QuantileRule::standard, 6);
    CHECK(a.c == b.c);
    for (double c : a.c) {
      CHECK(c >= 0.0);
      CHECK(c <= 1.0);
    }
  }

  TEST_CASE("parallel calibration equals the serial reference") {
    const auto bv = adaptive_binning(well_specified(4000, 7), 8);
    const auto a = conformal_calibrate(bv, 0.1, 100, 300, QuantileRule::paper, 8);
    const auto b = conformal_calibrate_serial(bv, 0.1, 100, 300, QuantileRule::paper, 8);
    CHECK(a.c == b.c);
  }

  TEST_CASE("smaller alpha never shrinks a bound") {
    const auto bv = adaptive_binning(well_specified(5000, 9), 10);
    const auto wide = conformal_calibrate(bv, 0.01, 200, 500, QuantileRule::standard, 10);
    const auto mid = conformal_calibrate(bv, 0.05, 200, 500, QuantileRule::standard, 10);
    const auto narrow = conformal_calibrate(bv, 0.3, 200, 500, QuantileRule::standard, 10);
    for (std::size_t j = 0; j < wide.c.size(); ++j) {
      CHECK(wide.c[j] >= mid.c[j]);
      CHECK(mid.c[j] >= narrow.c[j]);
    }
  }

  TEST_CASE("interval examples") {
    auto b = flat_bounds(10, 0.05);
    const auto hi = interval_predict(b, 0.97);
    CHECK(hi.bin == 9);
    CHECK(hi.lo == doctest::Approx(0.92));
    CHECK(hi.hi == 1.0);
    b.c[4] = 0.0;
    const auto mid = interval_predict(b, 0.5);
    CHECK(mid.bin == 4);
    CHECK(mid.lo == 0.5);
    CHECK(mid.hi == 0.5);

    ConformalBounds gap;
    gap.c = {0.1, 0.2};
    gap.ranges = {{0.2, 0.3}, {0.6, 0.8}};
    const auto below = interval_predict(gap, 0.05);
    CHECK(below.bin == 0);
    CHECK(below.lo == 0.0);
    CHECK(below.hi == doctest::Approx(0.15));
    CHECK(assign_bin(gap.ranges, 0.9) == 1);
    CHECK(assign_bin(gap.ranges, 0.4) == 0);
    CHECK(assign_bin(gap.ranges, 0.5) == 1);
    const std::vector<ScoreRange> even{{0.0, 0.25}, {0.75, 1.0}};
    CHECK(assign_bin(even, 0.5) == 0);
  }

  TEST_CASE("full-width bounds always cover") {
    const auto fresh = well_specified(2000, 11);
    const auto bv = adaptive_binning(fresh, 5);
    auto b = flat_bounds(5, 1.0);
    b.ranges = bv.ranges;
    const auto cov = empirical_coverage(b, fresh, 50, 100, 12);
    CHECK(cov.overall == 1.0);
  }

  TEST_CASE("zero bounds on noisy bins almost never cover") {
    const auto fresh = well_specified(2000, 13);
    const auto bv = adaptive_binning(fresh, 5);
    auto b = flat_bounds(5, 0.0);
    b.ranges = bv.ranges;
    const auto cov = empirical_coverage(b, fresh, 50, 100, 14);
    CHECK(cov.overall < 0.1);
  }

  TEST_CASE("standard rule meets the coverage target on well-specified data") {
    const auto valid = well_specified(50000, 15);
    const auto fresh = well_specified(50000, 16);
    const auto b = conformal_calibrate(adaptive_binning(valid, 10), 0.05, 200, 500, QuantileRule::standard, 17);
    const auto cov = empirical_coverage(b, fresh, 200, 500, 18);
    CHECK(cov.per_bin.size() == 10);
    CHECK(cov.trials == 200);
    CHECK(cov.overall >= 0.92);
  }

  TEST_CASE("coverage needs at least Q fresh pairs") {
    const auto b = flat_bounds(10, 0.1);
    try {
      (void)empirical_coverage(b, well_specified(5, 19), 10, 10, 20);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::insufficient_data);
    }
  }

  TEST_CASE("bounds csv round-trip") {
    const auto bv = adaptive_binning(well_specified(1000, 21), 10);
    const auto b = conformal_calibrate(bv, 0.05, 50, 100, QuantileRule::standard, 22);
    const auto path = std::filesystem::temp_directory_path() / "safepred_test_bounds.csv";
    save_bounds_csv(b, path);
    const auto back = load_bounds_csv(path);
    CHECK(back.c == b.c);
    REQUIRE(back.ranges.size() == b.ranges.size());
    for (std::size_t j = 0; j < b.ranges.size(); ++j) {
      CHECK(back.ranges[j].lo == b.ranges[j].lo);
      CHECK(back.ranges[j].hi == b.ranges[j].hi);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("rule names") {
    CHECK(parse_quantile_rule(quantile_rule_name(QuantileRule::paper)) == QuantileRule::paper);
    CHECK(parse_quantile_rule("standard") == QuantileRule::standard);
    CHECK_THROWS_AS(parse_quantile_rule("median"), Error);
  }
}
