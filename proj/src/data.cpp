#include "safepred/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"
#include "safepred/error.hpp"

namespace safepred {

using nlohmann::json;

const char* dataset_kind_name(DatasetKind kind) {
  return kind == DatasetKind::obs_controller ? "obs_controller" : "obs_action";
}

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "obs_controller") return DatasetKind::obs_controller;
  if (name == "obs_action") return DatasetKind::obs_action;
  throw Error(Errc::format, "unknown dataset kind '" + name + "'");
}

std::array<std::size_t, 2> Dataset::class_counts() const {
  std::array<std::size_t, 2> counts{0, 0};
  for (const auto& s : samples) ++counts[s.label == 1 ? 1 : 0];
  return counts;
}

void Dataset::validate() const {
  if (m < 1 || k < 0) throw Error(Errc::invalid_argument, "dataset needs m >= 1 and k >= 0");
  if (kind == DatasetKind::obs_controller && controller_ids.size() > 1) {
    throw Error(Errc::invalid_argument, "observation-controller dataset mixes controllers");
  }
  for (const auto& s : samples) {
    if (static_cast<int>(s.window.size()) != m) throw Error(Errc::dimension_mismatch, "sample window length != m");
    const bool want_actions = kind == DatasetKind::obs_action;
    if (want_actions != !s.actions.empty()) {
      throw Error(Errc::invalid_argument, "sample actions do not match the dataset kind");
    }
    if (want_actions && static_cast<int>(s.actions.size()) != m) {
      throw Error(Errc::dimension_mismatch, "sample action count != m");
    }
    if (!controller_ids.contains(s.controller_id)) {
      throw Error(Errc::invalid_argument, "sample controller missing from dataset controller set");
    }
  }
}

std::vector<Sample> build_windows(const Trajectory& traj, int m, int k, DatasetKind kind) {
  if (m < 1 || k < 0) throw Error(Errc::invalid_argument, "build_windows needs m >= 1 and k >= 0");
  const auto len = traj.size();
  if (len < static_cast<std::size_t>(m + k)) {
    throw Error(Errc::trajectory_too_short, "trajectory of length " + std::to_string(len) +
                                                " is shorter than m + k = " + std::to_string(m + k));
  }
  std::vector<Sample> out;
  out.reserve(len - static_cast<std::size_t>(m + k) + 1);
  for (std::size_t i = static_cast<std::size_t>(m - 1); i + static_cast<std::size_t>(k) < len; ++i) {
    Sample s;
    s.window.reserve(static_cast<std::size_t>(m));
    for (std::size_t j = i + 1 - static_cast<std::size_t>(m); j <= i; ++j) {
      s.window.push_back(traj.steps[j].observation);
      if (kind == DatasetKind::obs_action) s.actions.push_back(traj.steps[j].action);
    }
    s.label = traj.steps[i + static_cast<std::size_t>(k)].label;
    s.controller_id = traj.controller_id;
    s.trajectory_id = traj.id;
    s.time_index = i;
    out.push_back(std::move(s));
  }
  return out;
}

Dataset build_dataset(std::span<const Trajectory> trajectories, int m, int k, DatasetKind kind) {
  Dataset ds;
  ds.kind = kind;
  ds.m = m;
  ds.k = k;
  for (const auto& traj : trajectories) {
    auto windows = build_windows(traj, m, k, kind);
    ds.controller_ids.insert(traj.controller_id);
    std::move(windows.begin(), windows.end(), std::back_inserter(ds.samples));
  }
  ds.validate();
  return ds;
}

Dataset rebalance(const Dataset& ds, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by_class[ds.samples[i].label == 1 ? 1 : 0].push_back(i);
  if (by_class[0].empty() || by_class[1].empty()) {
    throw Error(Errc::rebalance_impossible, "cannot rebalance: class " + std::string(by_class[0].empty() ? "0" : "1") +
                                                " is empty (degenerate horizon?)");
  }
  const std::size_t target = std::max(by_class[0].size(), by_class[1].size());
  Rng rng(seed);
  std::vector<std::size_t> picked;
  picked.reserve(2 * target);
  for (const auto& members : by_class) {
    for (std::size_t i = 0; i < target; ++i) picked.push_back(members[uniform_index(rng, members.size())]);
  }
  // Fisher-Yates with our own index draw keeps the order reproducible across standard libraries.
  for (std::size_t i = picked.size(); i > 1; --i) std::swap(picked[i - 1], picked[uniform_index(rng, i)]);

  Dataset out;
  out.kind = ds.kind;
  out.m = ds.m;
  out.k = ds.k;
  out.controller_ids = ds.controller_ids;
  out.samples.reserve(picked.size());
  for (auto i : picked) out.samples.push_back(ds.samples[i]);
  return out;
}

void SplitSpec::validate() const {
  if (!(train > 0 && calib > 0 && valid > 0 && test > 0)) {
    throw Error(Errc::invalid_argument, "split fractions must be positive");
  }
  if (std::abs(train + calib + valid + test - 1.0) > 1e-9) {
    throw Error(Errc::invalid_argument, "split fractions must sum to 1");
  }
}

std::array<std::vector<std::uint64_t>, 4> split_trajectory_ids(std::vector<std::uint64_t> ids,
                                                               const SplitSpec& spec) {
  spec.validate();
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(spec.seed);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[uniform_index(rng, i)]);

  const std::array<double, 4> fractions{spec.train, spec.calib, spec.valid, spec.test};
  std::array<std::vector<std::uint64_t>, 4> parts;
  const double n = static_cast<double>(ids.size());
  double cumulative = 0.0;
  std::size_t begin = 0;
  for (std::size_t p = 0; p < 4; ++p) {
    cumulative += fractions[p];
    const std::size_t end = p == 3 ? ids.size() : static_cast<std::size_t>(std::llround(cumulative * n));
    parts[p].assign(ids.begin() + static_cast<std::ptrdiff_t>(begin),
                    ids.begin() + static_cast<std::ptrdiff_t>(std::max(begin, end)));
    begin = std::max(begin, end);
  }
  static constexpr const char* names[] = {"train", "calibration", "validation", "test"};
  for (std::size_t p = 0; p < 4; ++p) {
    if (parts[p].empty()) {
      throw Error(Errc::empty_split, std::string(names[p]) + " split is empty (" + std::to_string(ids.size()) +
                                         " trajectories)");
    }
  }
  return parts;
}

DatasetSplits split_dataset(const Dataset& ds, const SplitSpec& spec) {
  std::vector<std::uint64_t> ids;
  ids.reserve(ds.samples.size());
  for (const auto& s : ds.samples) ids.push_back(s.trajectory_id);
  const auto parts = split_trajectory_ids(std::move(ids), spec);

  std::map<std::uint64_t, int> owner;
  for (int p = 0; p < 4; ++p) {
    for (auto id : parts[static_cast<std::size_t>(p)]) owner[id] = p;
  }
  DatasetSplits out;
  std::array<Dataset*, 4> dst{&out.train, &out.calib, &out.valid, &out.test};
  for (auto* d : dst) {
    d->kind = ds.kind;
    d->m = ds.m;
    d->k = ds.k;
  }
  for (const auto& s : ds.samples) {
    Dataset& d = *dst[static_cast<std::size_t>(owner.at(s.trajectory_id))];
    d.samples.push_back(s);
    d.controller_ids.insert(s.controller_id);
  }
  return out;
}

namespace {

void append_pixel(std::string& out, float v) {
  // Fixed 4-decimal rounding with trailing zeros trimmed; 0 and 1 print bare.
  const long scaled = std::lround(static_cast<double>(v) * 10000.0);
  if (scaled == 0) {
    out += '0';
    return;
  }
  if (scaled == 10000) {
    out += '1';
    return;
  }
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), static_cast<double>(scaled) / 10000.0, std::chars_format::fixed, 4);
  std::string_view text(buf, static_cast<std::size_t>(res.ptr - buf));
  while (text.back() == '0') text.remove_suffix(1);
  if (text.back() == '.') text.remove_suffix(1);
  out.append(text);
}

json header_json(const Dataset& ds) {
  json h;
  h["format"] = "safepred-dataset";
  h["version"] = kDatasetFormatVersion;
  h["kind"] = dataset_kind_name(ds.kind);
  h["m"] = ds.m;
  h["k"] = ds.k;
  h["H"] = Observation::kHeight;
  h["W"] = Observation::kWidth;
  h["count"] = ds.samples.size();
  h["controllers"] = std::vector<int>(ds.controller_ids.begin(), ds.controller_ids.end());
  return h;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write dataset " + path.string());
  out << header_json(ds).dump() << '\n';

  std::string line;
  for (const auto& s : ds.samples) {
    line.clear();
    line += "{\"traj\":" + std::to_string(s.trajectory_id) + ",\"t\":" + std::to_string(s.time_index) +
            ",\"controller\":" + std::to_string(s.controller_id) + ",\"label\":" + std::to_string(s.label);
    if (ds.kind == DatasetKind::obs_action) {
      line += ",\"actions\":[";
      for (std::size_t j = 0; j < s.actions.size(); ++j) {
        if (j) line += ',';
        line += std::to_string(static_cast<int>(s.actions[j]));
      }
      line += ']';
    }
    line += ",\"frames\":[";
    for (std::size_t f = 0; f < s.window.size(); ++f) {
      if (f) line += ',';
      line += '[';
      const auto& px = s.window[f]->pixels;
      for (std::size_t p = 0; p < px.size(); ++p) {
        if (p) line += ',';
        append_pixel(line, px[p]);
      }
      line += ']';
    }
    line += "]}\n";
    out << line;
  }
  if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::format, path.string() + ": missing header");

  Dataset ds;
  std::size_t count = 0;
  try {
    const json h = json::parse(line);
    if (h.at("format") != "safepred-dataset") throw Error(Errc::format, path.string() + ": not a dataset file");
    if (h.at("version").get<int>() != kDatasetFormatVersion) {
      throw Error(Errc::format, path.string() + ": unsupported dataset version " + h.at("version").dump());
    }
    if (h.at("H").get<int>() != Observation::kHeight || h.at("W").get<int>() != Observation::kWidth) {
      throw Error(Errc::format, path.string() + ": image size does not match 32x32");
    }
    ds.kind = parse_dataset_kind(h.at("kind").get<std::string>());
    ds.m = h.at("m").get<int>();
    ds.k = h.at("k").get<int>();
    count = h.at("count").get<std::size_t>();
    for (int c : h.at("controllers")) ds.controller_ids.insert(c);
  } catch (const json::exception& e) {
    throw Error(Errc::format, path.string() + ": bad header: " + e.what());
  }

  // Overlapping windows share frames: (trajectory, time) -> frame.
  std::map<std::pair<std::uint64_t, std::size_t>, ObservationPtr> frames;
  ds.samples.reserve(count);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json r = json::parse(line);
      Sample s;
      s.trajectory_id = r.at("traj").get<std::uint64_t>();
      s.time_index = r.at("t").get<std::size_t>();
      s.controller_id = r.at("controller").get<int>();
      s.label = r.at("label").get<int>();
      if (s.label != 0 && s.label != 1) throw Error(Errc::format, "label must be 0 or 1");
      if (ds.kind == DatasetKind::obs_action) {
        for (int a : r.at("actions")) {
          if (a != -1 && a != 1) throw Error(Errc::format, "action must be -1 or +1");
          s.actions.push_back(static_cast<Action>(a));
        }
      }
      const auto& fr = r.at("frames");
      if (fr.size() != static_cast<std::size_t>(ds.m)) throw Error(Errc::format, "frame count != m");
      if (s.time_index + 1 < static_cast<std::size_t>(ds.m)) throw Error(Errc::format, "time index < m - 1");
      for (std::size_t f = 0; f < fr.size(); ++f) {
        const auto key = std::make_pair(s.trajectory_id, s.time_index + 1 + f - static_cast<std::size_t>(ds.m));
        auto it = frames.find(key);
        if (it == frames.end()) {
          const auto& px = fr[f];
          if (px.size() != static_cast<std::size_t>(Observation::kPixels)) {
            throw Error(Errc::format, "frame has wrong pixel count");
          }
          auto obs = std::make_shared<Observation>();
          for (std::size_t p = 0; p < px.size(); ++p) {
            const float v = px[p].get<float>();
            if (!(v >= 0.0f && v <= 1.0f)) throw Error(Errc::format, "pixel outside [0, 1]");
            obs->pixels[p] = v;
          }
          it = frames.emplace(key, std::move(obs)).first;
        }
        s.window.push_back(it->second);
      }
      ds.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw Error(Errc::format, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(Errc::format, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (ds.samples.size() != count) {
    throw Error(Errc::format, path.string() + ": expected " + std::to_string(count) + " records, found " +
                                  std::to_string(ds.samples.size()) + " (truncated?)");
  }
  ds.validate();
  return ds;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.kind != b.kind || a.m != b.m || a.k != b.k || a.controller_ids != b.controller_ids) return false;
  if (a.samples.size() != b.samples.size()) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto& x = a.samples[i];
    const auto& y = b.samples[i];
    if (x.label != y.label || x.controller_id != y.controller_id || x.trajectory_id != y.trajectory_id ||
        x.time_index != y.time_index || x.actions != y.actions || x.window.size() != y.window.size()) {
      return false;
    }
    for (std::size_t f = 0; f < x.window.size(); ++f) {
      if (!(*x.window[f] == *y.window[f])) return false;
    }
  }
  return true;
}

std::vector<ForecastPair> forecast_pairs(const Dataset& ds) {
  std::map<std::pair<std::uint64_t, std::size_t>, const Sample*> index;
  for (const auto& s : ds.samples) index.emplace(std::make_pair(s.trajectory_id, s.time_index), &s);
  std::vector<ForecastPair> out;
  out.reserve(index.size());
  for (const auto& [key, sample] : index) {
    auto next = index.find({key.first, key.second + 1});
    if (next == index.end()) continue;
    out.push_back({sample, next->second->window.back()});
  }
  return out;
}

}  // namespace safepred
