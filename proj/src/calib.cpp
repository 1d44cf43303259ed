#include "safepred/calib.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>

#include "safepred/csv.hpp"
#include "safepred/error.hpp"
#include "safepred/metrics.hpp"
#include "safepred/parallel.hpp"

namespace safepred {

using nlohmann::json;

namespace {

constexpr int kGradientIterations = 2000;
constexpr double kGradientStep = 0.1;
constexpr double kTemperatureLo = 0.05;
constexpr double kTemperatureHi = 20.0;

void check_inputs(std::span<const double> scores, std::span<const int> labels, std::size_t min_size) {
  if (scores.size() != labels.size()) throw Error(Errc::dimension_mismatch, "scores and labels differ in length");
  if (scores.size() < min_size) {
    throw Error(Errc::insufficient_data, "calibration needs at least " + std::to_string(min_size) + " samples");
  }
}

void require_both_classes(std::span<const int> labels, const char* who) {
  const auto safe = std::count(labels.begin(), labels.end(), 1);
  if (safe == 0 || safe == static_cast<std::ptrdiff_t>(labels.size())) {
    throw Error(Errc::single_class, std::string(who) + " needs both classes in the calibration data");
  }
}

double clamp_score(double s) { return std::clamp(s, kCalibEpsilon, 1.0 - kCalibEpsilon); }

struct Standardizer {
  double mean = 0.0;
  double scale = 1.0;
};

Standardizer standardize(std::span<const double> x) {
  Standardizer st;
  const double n = static_cast<double>(x.size());
  st.mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - st.mean) * (v - st.mean);
  const double sd = std::sqrt(var / n);
  st.scale = sd > 1e-12 ? sd : 1.0;
  return st;
}

// -log sigmoid(x), stable.
double softplus_neg(double x) { return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x)); }

double logistic_nll(std::span<const double> margin, std::span<const int> labels, double scale) {
  double total = 0.0;
  for (std::size_t i = 0; i < margin.size(); ++i) {
    const double z = margin[i] * scale;
    total += labels[i] == 1 ? softplus_neg(z) : softplus_neg(-z);
  }
  return total / static_cast<double>(margin.size());
}

Calibrator fit_temperature_margin(std::span<const double> margin, std::span<const int> labels) {
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = kTemperatureLo, b = kTemperatureHi;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = logistic_nll(margin, labels, 1.0 / c), fd = logistic_nll(margin, labels, 1.0 / d);
  for (int it = 0; it < 200 && b - a > 1e-9; ++it) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = logistic_nll(margin, labels, 1.0 / c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = logistic_nll(margin, labels, 1.0 / d);
    }
  }
  Calibrator cal;
  cal.kind = CalibratorKind::temperature;
  cal.params = {0.5 * (a + b)};
  return cal;
}

}  // namespace

const char* calibrator_kind_name(CalibratorKind kind) {
  switch (kind) {
    case CalibratorKind::platt: return "platt";
    case CalibratorKind::temperature: return "temperature";
    case CalibratorKind::histogram: return "histogram";
    case CalibratorKind::isotonic: return "isotonic";
    case CalibratorKind::beta: return "beta";
  }
  return "?";
}

CalibratorKind parse_calibrator_kind(const std::string& name) {
  for (auto k : {CalibratorKind::platt, CalibratorKind::temperature, CalibratorKind::histogram,
                 CalibratorKind::isotonic, CalibratorKind::beta}) {
    if (name == calibrator_kind_name(k)) return k;
  }
  throw Error(Errc::format, "unknown calibrator kind '" + name + "'");
}

int calibrator_tie_rank(CalibratorKind kind) {
  switch (kind) {
    case CalibratorKind::isotonic: return 0;
    case CalibratorKind::temperature: return 1;
    case CalibratorKind::platt: return 2;
    case CalibratorKind::beta: return 3;
    case CalibratorKind::histogram: return 4;
  }
  return 5;
}

double logit(double p) {
  const double q = clamp_score(p);
  return std::log(q / (1.0 - q));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double Calibrator::apply(double score) const {
  switch (kind) {
    case CalibratorKind::platt: return sigmoid(params.at(0) * logit(score) + params.at(1));
    case CalibratorKind::temperature: return sigmoid(logit(score) / params.at(0));
    case CalibratorKind::beta: {
      const double s = clamp_score(score);
      return sigmoid(params.at(0) * std::log(s) - params.at(1) * std::log(1.0 - s) + params.at(2));
    }
    case CalibratorKind::histogram: {
      const auto bin = std::lower_bound(edges.begin(), edges.end(), score) - edges.begin();
      return values.at(static_cast<std::size_t>(bin));
    }
    case CalibratorKind::isotonic: {
      auto it = std::lower_bound(edges.begin(), edges.end(), score);
      if (it == edges.end()) return values.back();
      return values[static_cast<std::size_t>(it - edges.begin())];
    }
  }
  return score;
}

std::vector<double> Calibrator::apply(std::span<const double> scores) const {
  std::vector<double> out(scores.size());
  std::transform(scores.begin(), scores.end(), out.begin(), [this](double s) { return apply(s); });
  return out;
}

json Calibrator::to_json() const {
  return {{"format", "safepred-calibrator"},
          {"kind", calibrator_kind_name(kind)},
          {"params", params},
          {"edges", edges},
          {"values", values}};
}

Calibrator Calibrator::from_json(const json& j) {
  try {
    if (j.at("format") != "safepred-calibrator") throw Error(Errc::format, "not a calibrator");
    Calibrator cal;
    cal.kind = parse_calibrator_kind(j.at("kind").get<std::string>());
    cal.params = j.at("params").get<std::vector<double>>();
    cal.edges = j.at("edges").get<std::vector<double>>();
    cal.values = j.at("values").get<std::vector<double>>();
    const std::size_t need_params = cal.kind == CalibratorKind::platt         ? 2
                                    : cal.kind == CalibratorKind::temperature ? 1
                                    : cal.kind == CalibratorKind::beta        ? 3
                                                                              : 0;
    bool ok = cal.params.size() == need_params;
    if (cal.kind == CalibratorKind::histogram) ok = ok && cal.values.size() == cal.edges.size() + 1;
    if (cal.kind == CalibratorKind::isotonic) ok = ok && !cal.values.empty() && cal.values.size() == cal.edges.size();
    if (cal.kind == CalibratorKind::temperature) ok = ok && cal.params[0] > 0.0;
    if (!ok) throw Error(Errc::format, "calibrator parameters do not match its kind");
    return cal;
  } catch (const json::exception& e) {
    throw Error(Errc::format, std::string("malformed calibrator: ") + e.what());
  }
}

Calibrator fit_platt(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, 2);
  require_both_classes(labels, "platt scaling");
  std::vector<double> x(scores.size());
  std::transform(scores.begin(), scores.end(), x.begin(), [](double s) { return logit(s); });
  const auto st = standardize(x);
  for (auto& v : x) v = (v - st.mean) / st.scale;
  // Start from the identity map.
  double w = st.scale, c = st.mean;
  const double n = static_cast<double>(x.size());
  for (int it = 0; it < kGradientIterations; ++it) {
    double gw = 0.0, gc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = sigmoid(w * x[i] + c) - labels[i];
      gw += r * x[i];
      gc += r;
    }
    w -= kGradientStep * gw / n;
    c -= kGradientStep * gc / n;
  }
  Calibrator cal;
  cal.kind = CalibratorKind::platt;
  cal.params = {w / st.scale, c - w * st.mean / st.scale};
  return cal;
}

Calibrator fit_temperature(std::span<const std::array<double, 2>> logits, std::span<const int> labels) {
  if (logits.size() != labels.size()) throw Error(Errc::dimension_mismatch, "logits and labels differ in length");
  if (logits.size() < 2) throw Error(Errc::insufficient_data, "temperature scaling needs at least 2 samples");
  require_both_classes(labels, "temperature scaling");
  std::vector<double> margin(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) margin[i] = logits[i][0] - logits[i][1];
  return fit_temperature_margin(margin, labels);
}

Calibrator fit_temperature(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, 2);
  require_both_classes(labels, "temperature scaling");
  std::vector<double> margin(scores.size());
  std::transform(scores.begin(), scores.end(), margin.begin(), [](double s) { return logit(s); });
  return fit_temperature_margin(margin, labels);
}

double apply_temperature(const Calibrator& cal, const std::array<double, 2>& logits) {
  if (cal.kind != CalibratorKind::temperature) throw Error(Errc::invalid_argument, "not a temperature calibrator");
  return sigmoid((logits[0] - logits[1]) / cal.params.at(0));
}

std::vector<double> pava(std::span<const double> y, std::span<const double> w) {
  if (!w.empty() && w.size() != y.size()) throw Error(Errc::dimension_mismatch, "pava weights differ in length");
  struct Block {
    double sum;
    double weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  blocks.reserve(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    blocks.push_back({wi * y[i], wi, 1});
    while (blocks.size() > 1) {
      const auto& hi = blocks[blocks.size() - 1];
      const auto& lo = blocks[blocks.size() - 2];
      if (lo.sum * hi.weight <= hi.sum * lo.weight) break;
      Block merged{lo.sum + hi.sum, lo.weight + hi.weight, lo.count + hi.count};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  std::vector<double> fitted;
  fitted.reserve(y.size());
  for (const auto& b : blocks) fitted.insert(fitted.end(), b.count, b.sum / b.weight);
  return fitted;
}

Calibrator fit_histogram(std::span<const double> scores, std::span<const int> labels, int Q) {
  if (Q < 1) throw Error(Errc::invalid_argument, "histogram binning needs Q >= 1");
  check_inputs(scores, labels, static_cast<std::size_t>(Q));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  const std::size_t n = scores.size(), q = static_cast<std::size_t>(Q);
  std::vector<double> means(q), weights(q);
  Calibrator cal;
  cal.kind = CalibratorKind::histogram;
  for (std::size_t b = 0; b < q; ++b) {
    const std::size_t lo = b * n / q, hi = (b + 1) * n / q;
    double safe = 0.0;
    for (std::size_t i = lo; i < hi; ++i) safe += labels[order[i]];
    weights[b] = static_cast<double>(hi - lo);
    means[b] = safe / weights[b];
    if (b + 1 < q) cal.edges.push_back(0.5 * (scores[order[hi - 1]] + scores[order[hi]]));
  }
  cal.values = pava(means, weights);
  return cal;
}

Calibrator fit_isotonic(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, 1);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  Calibrator cal;
  cal.kind = CalibratorKind::isotonic;
  std::vector<double> means, weights;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double safe = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) safe += labels[order[j++]];
    cal.edges.push_back(scores[order[i]]);
    weights.push_back(static_cast<double>(j - i));
    means.push_back(safe / weights.back());
    i = j;
  }
  cal.values = pava(means, weights);
  return cal;
}

Calibrator fit_beta(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, 2);
  require_both_classes(labels, "beta calibration");
  const std::size_t n = scores.size();
  std::vector<double> f1(n), f2(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = clamp_score(scores[i]);
    f1[i] = std::log(s);
    f2[i] = -std::log(1.0 - s);
  }
  const auto s1 = standardize(f1), s2 = standardize(f2);
  for (std::size_t i = 0; i < n; ++i) {
    f1[i] = (f1[i] - s1.mean) / s1.scale;
    f2[i] = (f2[i] - s2.mean) / s2.scale;
  }
  // Start from the identity map a = b = 1, c = 0.
  double A = s1.scale, B = s2.scale, C = s1.mean + s2.mean;
  const double dn = static_cast<double>(n);
  for (int it = 0; it < kGradientIterations; ++it) {
    double ga = 0.0, gb = 0.0, gc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = sigmoid(A * f1[i] + B * f2[i] + C) - labels[i];
      ga += r * f1[i];
      gb += r * f2[i];
      gc += r;
    }
    A = std::max(0.0, A - kGradientStep * ga / dn);
    B = std::max(0.0, B - kGradientStep * gb / dn);
    C -= kGradientStep * gc / dn;
  }
  Calibrator cal;
  cal.kind = CalibratorKind::beta;
  cal.params = {A / s1.scale, B / s2.scale, C - A * s1.mean / s1.scale - B * s2.mean / s2.scale};
  return cal;
}

std::vector<Calibrator> fit_all(std::span<const double> scores, std::span<const int> labels, int Q) {
  const std::array<CalibratorKind, 5> kinds{CalibratorKind::platt, CalibratorKind::temperature,
                                            CalibratorKind::histogram, CalibratorKind::isotonic,
                                            CalibratorKind::beta};
  std::array<std::optional<Calibrator>, 5> fitted;
  parallel_for(static_cast<std::ptrdiff_t>(kinds.size()), [&](std::ptrdiff_t i) {
    const auto u = static_cast<std::size_t>(i);
    try {
      switch (kinds[u]) {
        case CalibratorKind::platt: fitted[u] = fit_platt(scores, labels); break;
        case CalibratorKind::temperature: fitted[u] = fit_temperature(scores, labels); break;
        case CalibratorKind::histogram: fitted[u] = fit_histogram(scores, labels, Q); break;
        case CalibratorKind::isotonic: fitted[u] = fit_isotonic(scores, labels); break;
        case CalibratorKind::beta: fitted[u] = fit_beta(scores, labels); break;
      }
    } catch (const Error& e) {
      if (e.code() != Errc::single_class) throw;
    }
  });
  std::vector<Calibrator> out;
  for (auto& f : fitted) {
    if (f) out.push_back(std::move(*f));
  }
  return out;
}

CalibSelection select_min_ece(std::span<const Calibrator> candidates, std::span<const double> scores,
                              std::span<const int> labels, int Q) {
  if (candidates.empty()) throw Error(Errc::invalid_argument, "no calibrator candidates");
  CalibSelection sel;
  std::vector<double> eces;
  for (const auto& cal : candidates) {
    const auto calibrated = cal.apply(scores);
    eces.push_back(ece_mce(calibrated, labels, Q).ece);
    sel.ece.emplace_back(cal.kind, eces.back());
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const bool lower = eces[i] < eces[best];
    const bool tie_wins = eces[i] == eces[best] &&
                          calibrator_tie_rank(candidates[i].kind) < calibrator_tie_rank(candidates[best].kind);
    if (lower || tie_wins) best = i;
  }
  sel.chosen = candidates[best];
  return sel;
}

void save_calibrator(const Calibrator& cal, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out << cal.to_json().dump() << '\n';
}

Calibrator load_calibrator(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  try {
    return Calibrator::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(Errc::format, path.string() + ": " + e.what());
  }
}

void save_selection_csv(const CalibSelection& sel, const std::filesystem::path& path) {
  CsvTable table;
  table.header = {"kind", "ece", "chosen"};
  for (const auto& [kind, ece] : sel.ece) {
    table.rows.push_back({calibrator_kind_name(kind), format_double(ece), kind == sel.chosen.kind ? "1" : "0"});
  }
  write_csv(path, table);
}

}  // namespace safepred
