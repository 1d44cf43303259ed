#include "safepred/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "safepred/csv.hpp"
#include "safepred/error.hpp"

namespace safepred {

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) throw Error(Errc::dimension_mismatch, "predictions and labels differ in length");
  if (a == 0) throw Error(Errc::invalid_argument, "metrics need at least one sample");
}

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

Confusion confusion(std::span<const int> predictions, std::span<const int> labels) {
  check_lengths(predictions.size(), labels.size());
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = predictions[i] == 1, truth = labels[i] == 1;
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_score(std::span<const int> predictions, std::span<const int> labels) {
  const auto c = confusion(predictions, labels);
  const double denom = 2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp + c.fn);
  return c.tp == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / denom;
}

double false_positive_rate(std::span<const int> predictions, std::span<const int> labels) {
  const auto c = confusion(predictions, labels);
  return c.fp + c.tn == 0 ? 0.0 : static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn);
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  const auto c = confusion(predictions, labels);
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(labels.size());
}

std::vector<ScoredPair> make_pairs(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores.size(), labels.size());
  std::vector<ScoredPair> pairs(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) pairs[i] = {scores[i], labels[i]};
  return pairs;
}

std::vector<ReliabilityRow> reliability_data(std::span<const double> scores, std::span<const int> labels, int Q,
                                             const ConformalBounds* bounds) {
  const auto pairs = make_pairs(scores, labels);
  const auto bv = adaptive_binning(pairs, Q);
  if (bounds && bounds->c.size() != bv.bins.size()) {
    throw Error(Errc::dimension_mismatch, "bounds have " + std::to_string(bounds->c.size()) + " bins, expected " +
                                              std::to_string(bv.bins.size()));
  }
  std::vector<ReliabilityRow> rows;
  for (std::size_t j = 0; j < bv.bins.size(); ++j) {
    const auto& bin = bv.bins[j];
    ReliabilityRow row;
    row.bin = static_cast<int>(j);
    for (const auto& p : bin) {
      row.conf += p.g;
      row.acc += p.label;
    }
    row.count = bin.size();
    row.conf /= static_cast<double>(bin.size());
    row.acc /= static_cast<double>(bin.size());
    if (bounds) row.c = bounds->c[j];
    rows.push_back(row);
  }
  return rows;
}

EceMce ece_mce(std::span<const double> scores, std::span<const int> labels, int Q) {
  const auto rows = reliability_data(scores, labels, Q);
  EceMce out;
  std::size_t total = 0;
  for (const auto& r : rows) total += r.count;
  for (const auto& r : rows) {
    const double gap = std::abs(r.conf - r.acc);
    out.ece += static_cast<double>(r.count) / static_cast<double>(total) * gap;
    out.mce = std::max(out.mce, gap);
  }
  return out;
}

void write_reliability_csv(std::span<const ReliabilityRow> rows, const std::filesystem::path& path) {
  CsvTable table;
  table.header = {"bin", "conf", "acc", "count", "c"};
  for (const auto& r : rows) {
    table.rows.push_back({std::to_string(r.bin), format_double(r.conf), format_double(r.acc),
                          std::to_string(r.count), r.c ? format_double(*r.c) : std::string()});
  }
  write_csv(path, table);
}

std::vector<ReliabilityRow> read_reliability_csv(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto bin = table.column("bin"), conf = table.column("conf"), acc = table.column("acc"),
             count = table.column("count"), c = table.column("c");
  std::vector<ReliabilityRow> rows;
  for (const auto& cells : table.rows) {
    ReliabilityRow r;
    r.bin = static_cast<int>(parse_int(cells[bin]));
    r.conf = parse_double(cells[conf]);
    r.acc = parse_double(cells[acc]);
    r.count = static_cast<std::size_t>(parse_int(cells[count]));
    if (!cells[c].empty()) r.c = parse_double(cells[c]);
    rows.push_back(r);
  }
  return rows;
}

void write_metrics_csv(std::span<const MetricsRow> rows, const std::filesystem::path& path) {
  CsvTable table;
  table.header = {"predictor", "k", "split", "calibration", "f1", "fpr", "ece", "mce", "n"};
  for (const auto& r : rows) {
    table.rows.push_back({r.predictor, std::to_string(r.k), r.split, r.calibration, format_double(r.f1),
                          format_double(r.fpr), format_double(r.ece), format_double(r.mce), std::to_string(r.n)});
  }
  write_csv(path, table);
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto predictor = table.column("predictor"), k = table.column("k"), split = table.column("split"),
             calibration = table.column("calibration"), f1 = table.column("f1"), fpr = table.column("fpr"),
             ece = table.column("ece"), mce = table.column("mce"), n = table.column("n");
  std::vector<MetricsRow> rows;
  for (const auto& cells : table.rows) {
    rows.push_back({cells[predictor], static_cast<int>(parse_int(cells[k])), cells[split], cells[calibration],
                    parse_double(cells[f1]), parse_double(cells[fpr]), parse_double(cells[ece]),
                    parse_double(cells[mce]), static_cast<std::size_t>(parse_int(cells[n]))});
  }
  return rows;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(Errc::invalid_argument, "spearman needs two equal series");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace safepred
