// Spatiotemporal datasets: synthetic generation, CSV ingestion, calendar
// features, chronological splits, standardization and sliding windows.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/tensor.hpp"

namespace fedstgcrn {

// T x N x D values; channel 0 is the target series, the rest exogenous.
// Timestamps are UTC seconds since the Unix epoch.
struct SpatioTemporalDataset {
  std::size_t num_steps = 0;
  std::size_t num_nodes = 0;
  std::size_t num_channels = 0;
  std::vector<double> values;
  std::vector<std::int64_t> timestamps;
  std::vector<std::string> node_ids;
  std::vector<std::string> channel_names;

  double at(std::size_t t, std::size_t n, std::size_t d) const {
    return values[(t * num_nodes + n) * num_channels + d];
  }
  double& at(std::size_t t, std::size_t n, std::size_t d) { return values[(t * num_nodes + n) * num_channels + d]; }

  std::int64_t interval() const { return num_steps > 1 ? timestamps[1] - timestamps[0] : 0; }

  void validate() const {
    if (num_steps == 0 || num_nodes == 0 || num_channels == 0) throw DataError("dataset: empty dimension");
    if (values.size() != num_steps * num_nodes * num_channels) throw DataError("dataset: value count does not match T*N*D");
    if (timestamps.size() != num_steps) throw DataError("dataset: timestamp count does not match T");
    if (node_ids.size() != num_nodes) throw DataError("dataset: node id count does not match N");
    for (std::size_t t = 1; t < num_steps; ++t) {
      const auto step = timestamps[t] - timestamps[t - 1];
      if (step <= 0) throw DataError("dataset: timestamps not strictly increasing at step " + std::to_string(t));
      if (step != interval()) throw DataError("dataset: irregular interval at step " + std::to_string(t));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) throw DataError("dataset: non-finite value at flat index " + std::to_string(i));
    }
  }

  // Rows [begin, end) along time.
  SpatioTemporalDataset rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > num_steps) throw DataError("dataset: row range out of bounds");
    SpatioTemporalDataset out = shell();
    out.num_steps = end - begin;
    const std::size_t row = num_nodes * num_channels;
    out.values.assign(values.begin() + static_cast<std::ptrdiff_t>(begin * row),
                      values.begin() + static_cast<std::ptrdiff_t>(end * row));
    out.timestamps.assign(timestamps.begin() + static_cast<std::ptrdiff_t>(begin),
                          timestamps.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
  }

  // Same nodes and channels, no rows.
  SpatioTemporalDataset shell() const {
    SpatioTemporalDataset out;
    out.num_nodes = num_nodes;
    out.num_channels = num_channels;
    out.node_ids = node_ids;
    out.channel_names = channel_names;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

// Accepts "YYYY-MM-DD", "YYYY-MM-DDTHH:MM", "YYYY-MM-DDTHH:MM:SS" (a space
// may replace the T; a trailing Z is ignored). Times are taken as UTC.
inline std::int64_t parse_iso8601(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char sep = 0;
  std::string rest;
  const auto fail = [&] { throw DataError("unparseable timestamp '" + text + "'"); };
  if (text.size() < 10 || text[4] != '-' || text[7] != '-') fail();
  if (std::sscanf(text.c_str(), "%4d-%2d-%2d", &y, &mo, &d) != 3) fail();
  if (text.size() > 10) {
    sep = text[10];
    if (sep != 'T' && sep != ' ') fail();
    rest = text.substr(11);
    if (!rest.empty() && rest.back() == 'Z') rest.pop_back();
    int n = 0;
    if (rest.size() == 5) {
      n = std::sscanf(rest.c_str(), "%2d:%2d", &h, &mi);
      if (n != 2 || rest[2] != ':') fail();
    } else if (rest.size() == 8) {
      n = std::sscanf(rest.c_str(), "%2d:%2d:%2d", &h, &mi, &s);
      if (n != 3 || rest[2] != ':' || rest[5] != ':') fail();
    } else {
      fail();
    }
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 59) fail();
  const auto days_since_epoch = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days_since_epoch) * 86400 + h * 3600 + mi * 60 + s;
}

inline std::string format_iso8601(std::int64_t ts) {
  using namespace std::chrono;
  const auto day_count = static_cast<int>(ts >= 0 ? ts / 86400 : -((-ts + 86399) / 86400));
  const std::int64_t secs = ts - static_cast<std::int64_t>(day_count) * 86400;
  const year_month_day ymd{sys_days{days{day_count}}};
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<int>(secs / 3600),
                static_cast<int>(secs / 60 % 60), static_cast<int>(secs % 60));
  return buf;
}

// ISO weekday with Monday = 0.
inline unsigned weekday_index(std::int64_t ts) {
  using namespace std::chrono;
  const auto day_count = static_cast<int>(ts >= 0 ? ts / 86400 : -((-ts + 86399) / 86400));
  return weekday{sys_days{days{day_count}}}.iso_encoding() - 1;
}

inline double seconds_of_day(std::int64_t ts) {
  const auto s = ts % 86400;
  return static_cast<double>(s < 0 ? s + 86400 : s);
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t num_nodes = 6;
  std::size_t num_steps = 720;
  std::size_t exog_channels = 2;
  std::uint64_t seed = 42;
  std::size_t daily_period = 24;
  std::size_t weekly_period = 168;
  double noise_sd = 1.0;
  double coupling = 0.3;                     // weight of the neighbour average, in [0, 1]
  std::int64_t start_time = 1704067200;      // 2024-01-01T00:00:00Z, a Monday
  std::int64_t interval_seconds = 3600;

  void validate() const {
    if (num_nodes == 0) throw DataError("synthetic: num_nodes must be positive");
    if (daily_period < 2 || weekly_period < 2) throw DataError("synthetic: periods must be at least 2");
    if (num_steps < 2 * weekly_period) {
      throw DataError("synthetic: num_steps " + std::to_string(num_steps) + " < 2 * weekly_period " +
                      std::to_string(2 * weekly_period));
    }
    if (!(noise_sd >= 0.0)) throw DataError("synthetic: noise_sd must be non-negative");
    if (!(coupling >= 0.0 && coupling <= 1.0)) throw DataError("synthetic: coupling must lie in [0, 1]");
    if (interval_seconds <= 0) throw DataError("synthetic: interval_seconds must be positive");
  }
};

// Target: per-node level plus daily and weekly sinusoids, mixed with the mean
// of its neighbours on a seeded random graph, plus Gaussian noise, clipped at
// zero. Exogenous channels alternate between a smooth temperature-like signal
// and sparse decaying precipitation-like bursts.
inline SpatioTemporalDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t T = spec.num_steps, N = spec.num_nodes, D = 1 + spec.exog_channels;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;

  struct NodeShape {
    double level, daily_amp, daily_phase, weekly_amp, weekly_phase;
  };
  std::vector<NodeShape> shapes(N);
  for (auto& s : shapes) {
    s.level = 10.0 + 6.0 * unit(rng);
    s.daily_amp = 3.0 + 3.0 * unit(rng);
    s.daily_phase = two_pi * unit(rng);
    s.weekly_amp = 1.0 + 2.0 * unit(rng);
    s.weekly_phase = two_pi * unit(rng);
  }

  // Undirected random graph: every node links to up to two random others.
  std::vector<std::vector<std::size_t>> neighbours(N);
  if (N > 1) {
    std::uniform_int_distribution<std::size_t> pick(0, N - 1);
    for (std::size_t n = 0; n < N; ++n) {
      for (int k = 0; k < 2; ++k) {
        std::size_t m = pick(rng);
        if (m == n) m = (m + 1) % N;
        if (std::find(neighbours[n].begin(), neighbours[n].end(), m) == neighbours[n].end()) {
          neighbours[n].push_back(m);
          neighbours[m].push_back(n);
        }
      }
    }
  }

  SpatioTemporalDataset ds;
  ds.num_steps = T;
  ds.num_nodes = N;
  ds.num_channels = D;
  ds.values.assign(T * N * D, 0.0);
  ds.timestamps.resize(T);
  for (std::size_t t = 0; t < T; ++t) ds.timestamps[t] = spec.start_time + static_cast<std::int64_t>(t) * spec.interval_seconds;
  for (std::size_t n = 0; n < N; ++n) ds.node_ids.push_back("node_" + std::to_string(n));
  ds.channel_names.push_back("value");
  for (std::size_t j = 0; j < spec.exog_channels; ++j) {
    ds.channel_names.push_back((j % 2 == 0 ? "temperature_" : "precipitation_") + std::to_string(j / 2));
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> base(N);
  for (std::size_t t = 0; t < T; ++t) {
    const double td = static_cast<double>(t);
    for (std::size_t n = 0; n < N; ++n) {
      const auto& s = shapes[n];
      base[n] = s.level + s.daily_amp * std::sin(two_pi * td / static_cast<double>(spec.daily_period) + s.daily_phase) +
                s.weekly_amp * std::sin(two_pi * td / static_cast<double>(spec.weekly_period) + s.weekly_phase);
    }
    for (std::size_t n = 0; n < N; ++n) {
      double v = base[n];
      if (spec.coupling > 0.0 && !neighbours[n].empty()) {
        double avg = 0.0;
        for (auto m : neighbours[n]) avg += base[m];
        avg /= static_cast<double>(neighbours[n].size());
        v = (1.0 - spec.coupling) * v + spec.coupling * avg;
      }
      if (spec.noise_sd > 0.0) v += spec.noise_sd * gauss(rng);
      ds.at(t, n, 0) = std::max(0.0, v);
    }
  }

  for (std::size_t j = 0; j < spec.exog_channels; ++j) {
    const std::size_t ch = 1 + j;
    std::vector<double> node_scale(N);
    for (auto& s : node_scale) s = 0.8 + 0.4 * unit(rng);
    if (j % 2 == 0) {
      const double phase = two_pi * unit(rng);
      double drift = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        drift = 0.98 * drift + 0.2 * gauss(rng);
        const double td = static_cast<double>(t);
        const double temp = 12.0 + 6.0 * std::sin(two_pi * td / static_cast<double>(spec.daily_period) + phase) + drift;
        for (std::size_t n = 0; n < N; ++n) ds.at(t, n, ch) = temp + (node_scale[n] - 1.0) * 5.0;
      }
    } else {
      std::exponential_distribution<double> burst(0.5);
      double rain = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        rain *= 0.7;
        if (unit(rng) < 0.03) rain += burst(rng);
        if (rain < 1e-3) rain = 0.0;
        for (std::size_t n = 0; n < N; ++n) ds.at(t, n, ch) = rain * node_scale[n];
      }
    }
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// CSV ingestion (long format: one row per timestamp and node)
// ---------------------------------------------------------------------------

struct CsvSchema {
  std::string time_col = "timestamp";
  std::string node_col = "node";
  std::string value_col = "value";
  std::vector<std::string> exog_cols;
};

struct CsvLoadResult {
  SpatioTemporalDataset dataset;
  std::size_t missing_cells = 0;  // (time, node) grid cells absent from the file, zero-filled
  double missing_fraction = 0.0;
};

namespace csv_detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline double parse_number(const std::string& s, std::size_t line_no, const std::string& column) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("line " + std::to_string(line_no) + ": column '" + column + "' is not a finite number: '" + s + "'");
  }
}

}  // namespace csv_detail

inline CsvLoadResult load_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv: empty input");
  const auto header = csv_detail::split_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("csv: missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t time_idx = column(schema.time_col), node_idx = column(schema.node_col),
                    value_idx = column(schema.value_col);
  std::vector<std::size_t> exog_idx;
  for (const auto& c : schema.exog_cols) exog_idx.push_back(column(c));
  const std::size_t D = 1 + exog_idx.size();

  struct Row {
    std::int64_t ts;
    std::size_t node;
    std::vector<double> channels;
  };
  std::vector<Row> rows;
  std::vector<std::string> node_ids;
  std::unordered_map<std::string, std::size_t> node_index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = csv_detail::split_line(line);
    if (f.size() != header.size()) {
      throw DataError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(f.size()));
    }
    Row r;
    try {
      r.ts = parse_iso8601(f[time_idx]);
    } catch (const DataError& e) {
      throw DataError("csv line " + std::to_string(line_no) + ": " + e.what());
    }
    auto [it, inserted] = node_index.try_emplace(f[node_idx], node_ids.size());
    if (inserted) node_ids.push_back(f[node_idx]);
    r.node = it->second;
    r.channels.push_back(csv_detail::parse_number(f[value_idx], line_no, schema.value_col));
    for (std::size_t k = 0; k < exog_idx.size(); ++k) {
      r.channels.push_back(csv_detail::parse_number(f[exog_idx[k]], line_no, schema.exog_cols[k]));
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError("csv: no data rows");

  std::vector<std::int64_t> stamps;
  stamps.reserve(rows.size());
  for (const auto& r : rows) stamps.push_back(r.ts);
  std::sort(stamps.begin(), stamps.end());
  stamps.erase(std::unique(stamps.begin(), stamps.end()), stamps.end());
  std::int64_t interval = 0;
  for (std::size_t i = 1; i < stamps.size(); ++i) {
    const auto gap = stamps[i] - stamps[i - 1];
    interval = interval == 0 ? gap : std::min(interval, gap);
  }
  const std::int64_t origin = stamps.front();
  const std::size_t T = interval == 0 ? 1 : static_cast<std::size_t>((stamps.back() - origin) / interval) + 1;
  for (auto s : stamps) {
    if (interval != 0 && (s - origin) % interval != 0) {
      throw DataError("csv: timestamp " + format_iso8601(s) + " is off the " + std::to_string(interval) + "s grid");
    }
  }

  CsvLoadResult result;
  auto& ds = result.dataset;
  ds.num_steps = T;
  ds.num_nodes = node_ids.size();
  ds.num_channels = D;
  ds.node_ids = node_ids;
  ds.channel_names.push_back(schema.value_col);
  for (const auto& c : schema.exog_cols) ds.channel_names.push_back(c);
  ds.values.assign(T * ds.num_nodes * D, 0.0);
  ds.timestamps.resize(T);
  for (std::size_t t = 0; t < T; ++t) ds.timestamps[t] = origin + static_cast<std::int64_t>(t) * interval;

  std::vector<bool> seen(T * ds.num_nodes, false);
  for (const auto& r : rows) {
    const std::size_t t = interval == 0 ? 0 : static_cast<std::size_t>((r.ts - origin) / interval);
    const std::size_t cell = t * ds.num_nodes + r.node;
    if (seen[cell]) {
      throw DataError("csv: duplicate row for (time=" + format_iso8601(r.ts) + ", node=" + node_ids[r.node] + ")");
    }
    seen[cell] = true;
    for (std::size_t d = 0; d < D; ++d) ds.at(t, r.node, d) = r.channels[d];
  }
  result.missing_cells = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), false));
  result.missing_fraction = static_cast<double>(result.missing_cells) / static_cast<double>(seen.size());
  ds.validate();
  return result;
}

inline CsvLoadResult load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("csv: cannot open '" + path + "'");
  return load_csv(in, schema);
}

// Writes the long format read by load_csv (timestamp,node,value,<exog...>).
inline void write_csv(std::ostream& out, const SpatioTemporalDataset& ds) {
  out << "timestamp,node";
  for (const auto& c : ds.channel_names) out << ',' << c;
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < ds.num_steps; ++t) {
    const std::string ts = format_iso8601(ds.timestamps[t]);
    for (std::size_t n = 0; n < ds.num_nodes; ++n) {
      out << ts << ',' << ds.node_ids[n];
      for (std::size_t d = 0; d < ds.num_channels; ++d) {
        std::snprintf(buf, sizeof(buf), "%.17g", ds.at(t, n, d));
        out << ',' << buf;
      }
      out << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Appends time-of-day/24 and ISO weekday/7 (Monday = 0) to every node.
inline SpatioTemporalDataset add_calendar_features(const SpatioTemporalDataset& ds) {
  SpatioTemporalDataset out = ds.shell();
  out.num_steps = ds.num_steps;
  out.timestamps = ds.timestamps;
  out.num_channels = ds.num_channels + 2;
  out.channel_names.push_back("time_of_day");
  out.channel_names.push_back("day_of_week");
  out.values.assign(out.num_steps * out.num_nodes * out.num_channels, 0.0);
  for (std::size_t t = 0; t < ds.num_steps; ++t) {
    const double tod = seconds_of_day(ds.timestamps[t]) / 86400.0;
    const double dow = static_cast<double>(weekday_index(ds.timestamps[t])) / 7.0;
    for (std::size_t n = 0; n < ds.num_nodes; ++n) {
      for (std::size_t d = 0; d < ds.num_channels; ++d) out.at(t, n, d) = ds.at(t, n, d);
      out.at(t, n, ds.num_channels) = tod;
      out.at(t, n, ds.num_channels + 1) = dow;
    }
  }
  return out;
}

struct SplitFractions {
  double train = 0.70;
  double val = 0.20;
  double test = 0.10;
};

struct DataSplit {
  SpatioTemporalDataset train, val, test;
};

// Contiguous train/val/test blocks with boundaries at floor(T * cumulative
// fraction). Every block must hold at least `min_length` steps.
inline DataSplit split_chronological(const SpatioTemporalDataset& ds, SplitFractions fr = {}, std::size_t min_length = 1) {
  if (fr.train < 0 || fr.val < 0 || fr.test < 0 || std::abs(fr.train + fr.val + fr.test - 1.0) > 1e-9) {
    throw DataError("split: fractions must be non-negative and sum to 1");
  }
  const double T = static_cast<double>(ds.num_steps);
  const auto b1 = static_cast<std::size_t>(std::floor(T * fr.train + 1e-9));
  const auto b2 = static_cast<std::size_t>(std::floor(T * (fr.train + fr.val) + 1e-9));
  const std::size_t lens[3] = {b1, b2 - b1, ds.num_steps - b2};
  const char* names[3] = {"train", "validation", "test"};
  for (int i = 0; i < 3; ++i) {
    if (lens[i] < min_length) {
      throw DataError(std::string("split: ") + names[i] + " segment has " + std::to_string(lens[i]) +
                      " steps, needs at least " + std::to_string(min_length) + " (lookback + horizon)");
    }
  }
  return DataSplit{ds.rows(0, b1), ds.rows(b1, b2), ds.rows(b2, ds.num_steps)};
}

// Splits each block [boundaries[i], boundaries[i+1]) separately (e.g. one
// block per month). Empty `boundaries` means one block spanning the dataset.
inline std::vector<DataSplit> split_segments(const SpatioTemporalDataset& ds, std::vector<std::size_t> boundaries,
                                             SplitFractions fr = {}, std::size_t min_length = 1) {
  if (boundaries.empty()) boundaries = {0, ds.num_steps};
  if (boundaries.front() != 0) boundaries.insert(boundaries.begin(), 0);
  if (boundaries.back() != ds.num_steps) boundaries.push_back(ds.num_steps);
  std::vector<DataSplit> out;
  for (std::size_t i = 0; i + 1 < boundaries.size(); ++i) {
    if (boundaries[i + 1] <= boundaries[i]) throw DataError("split: segment boundaries must be increasing");
    out.push_back(split_chronological(ds.rows(boundaries[i], boundaries[i + 1]), fr, min_length));
  }
  return out;
}

// Per (node, channel) mean and population standard deviation.
struct Scaler {
  std::size_t num_nodes = 0, num_channels = 0;
  std::vector<double> mean, std;  // N x D
  std::vector<std::string> warnings;

  double mean_at(std::size_t n, std::size_t d) const { return mean[n * num_channels + d]; }
  double std_at(std::size_t n, std::size_t d) const { return std[n * num_channels + d]; }
};

// Fits on the concatenation of `parts` (all training blocks). Zero-variance
// channels get std 1 and a warning.
inline Scaler fit_scaler(const std::vector<const SpatioTemporalDataset*>& parts) {
  if (parts.empty()) throw DataError("fit_scaler: no training data");
  Scaler sc;
  sc.num_nodes = parts.front()->num_nodes;
  sc.num_channels = parts.front()->num_channels;
  const std::size_t cells = sc.num_nodes * sc.num_channels;
  std::vector<double> sum(cells, 0.0);
  std::size_t count = 0;
  for (const auto* p : parts) {
    if (p->num_nodes != sc.num_nodes || p->num_channels != sc.num_channels) throw DataError("fit_scaler: inconsistent parts");
    for (std::size_t t = 0; t < p->num_steps; ++t)
      for (std::size_t c = 0; c < cells; ++c) sum[c] += p->values[t * cells + c];
    count += p->num_steps;
  }
  if (count == 0) throw DataError("fit_scaler: training data has no rows");
  sc.mean.resize(cells);
  for (std::size_t c = 0; c < cells; ++c) sc.mean[c] = sum[c] / static_cast<double>(count);
  std::vector<double> sq(cells, 0.0);
  for (const auto* p : parts) {
    for (std::size_t t = 0; t < p->num_steps; ++t)
      for (std::size_t c = 0; c < cells; ++c) {
        const double d = p->values[t * cells + c] - sc.mean[c];
        sq[c] += d * d;
      }
  }
  sc.std.resize(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    const double sd = std::sqrt(sq[c] / static_cast<double>(count));
    if (sd > 0.0) {
      sc.std[c] = sd;
    } else {
      sc.std[c] = 1.0;
      sc.warnings.push_back("zero variance for node " + std::to_string(c / sc.num_channels) + " channel " +
                            std::to_string(c % sc.num_channels) + "; using std 1");
    }
  }
  return sc;
}

inline Scaler fit_scaler(const SpatioTemporalDataset& train) { return fit_scaler(std::vector{&train}); }

inline SpatioTemporalDataset transform(const SpatioTemporalDataset& ds, const Scaler& sc) {
  if (ds.num_nodes != sc.num_nodes || ds.num_channels != sc.num_channels) throw DataError("transform: scaler shape mismatch");
  SpatioTemporalDataset out = ds;
  const std::size_t cells = sc.num_nodes * sc.num_channels;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const std::size_t c = i % cells;
    out.values[i] = (out.values[i] - sc.mean[c]) / sc.std[c];
  }
  return out;
}

// Maps standardized target-channel values back to original units. `values`
// is any flat array whose last axis is the node axis (e.g. [S, Q, N]).
inline std::vector<double> inverse_transform_target(std::span<const double> values, const Scaler& sc) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t n = i % sc.num_nodes;
    out[i] = values[i] * sc.std_at(n, 0) + sc.mean_at(n, 0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sliding windows
// ---------------------------------------------------------------------------

// Stride-1 samples: inputs [S, p, N, D], targets [S, Q, N] (channel 0).
struct WindowSet {
  std::size_t count = 0, lookback = 0, horizon = 0, num_nodes = 0, num_channels = 0;
  std::vector<double> inputs;
  std::vector<double> targets;
  std::vector<std::int64_t> input_last_time;
  std::vector<std::int64_t> target_first_time;

  std::size_t input_stride() const { return lookback * num_nodes * num_channels; }
  std::size_t target_stride() const { return horizon * num_nodes; }

  template <typename T>
  std::pair<Tensor<T>, Tensor<T>> batch(std::span<const std::size_t> indices) const {
    std::vector<T> x(indices.size() * input_stride());
    std::vector<T> y(indices.size() * target_stride());
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const std::size_t s = indices[b];
      std::transform(inputs.begin() + static_cast<std::ptrdiff_t>(s * input_stride()),
                     inputs.begin() + static_cast<std::ptrdiff_t>((s + 1) * input_stride()),
                     x.begin() + static_cast<std::ptrdiff_t>(b * input_stride()), [](double v) { return static_cast<T>(v); });
      std::transform(targets.begin() + static_cast<std::ptrdiff_t>(s * target_stride()),
                     targets.begin() + static_cast<std::ptrdiff_t>((s + 1) * target_stride()),
                     y.begin() + static_cast<std::ptrdiff_t>(b * target_stride()), [](double v) { return static_cast<T>(v); });
    }
    return {Tensor<T>({indices.size(), lookback, num_nodes, num_channels}, std::move(x)),
            Tensor<T>({indices.size(), horizon, num_nodes}, std::move(y))};
  }

  template <typename T>
  std::pair<Tensor<T>, Tensor<T>> range(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return batch<T>(idx);
  }
};

inline WindowSet make_windows(const SpatioTemporalDataset& ds, std::size_t lookback, std::size_t horizon) {
  if (lookback == 0 || horizon == 0) throw DataError("make_windows: lookback and horizon must be positive");
  if (ds.num_steps < lookback + horizon) {
    throw DataError("make_windows: segment of " + std::to_string(ds.num_steps) + " steps is shorter than lookback + horizon = " +
                    std::to_string(lookback + horizon));
  }
  WindowSet w;
  w.count = ds.num_steps - lookback - horizon + 1;
  w.lookback = lookback;
  w.horizon = horizon;
  w.num_nodes = ds.num_nodes;
  w.num_channels = ds.num_channels;
  const std::size_t row = ds.num_nodes * ds.num_channels;
  w.inputs.reserve(w.count * w.input_stride());
  w.targets.reserve(w.count * w.target_stride());
  for (std::size_t s = 0; s < w.count; ++s) {
    w.inputs.insert(w.inputs.end(), ds.values.begin() + static_cast<std::ptrdiff_t>(s * row),
                    ds.values.begin() + static_cast<std::ptrdiff_t>((s + lookback) * row));
    for (std::size_t q = 0; q < horizon; ++q)
      for (std::size_t n = 0; n < ds.num_nodes; ++n) w.targets.push_back(ds.at(s + lookback + q, n, 0));
    w.input_last_time.push_back(ds.timestamps[s + lookback - 1]);
    w.target_first_time.push_back(ds.timestamps[s + lookback]);
  }
  return w;
}

inline WindowSet concat_windows(const std::vector<WindowSet>& parts) {
  if (parts.empty()) throw DataError("concat_windows: nothing to concatenate");
  WindowSet out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto& p = parts[i];
    if (p.lookback != out.lookback || p.horizon != out.horizon || p.num_nodes != out.num_nodes ||
        p.num_channels != out.num_channels) {
      throw DataError("concat_windows: incompatible window sets");
    }
    out.count += p.count;
    out.inputs.insert(out.inputs.end(), p.inputs.begin(), p.inputs.end());
    out.targets.insert(out.targets.end(), p.targets.begin(), p.targets.end());
    out.input_last_time.insert(out.input_last_time.end(), p.input_last_time.begin(), p.input_last_time.end());
    out.target_first_time.insert(out.target_first_time.end(), p.target_first_time.begin(), p.target_first_time.end());
  }
  return out;
}

// Everything a client needs from its raw dataset: scaler fitted on the
// training blocks only, and standardized window sets for each split.
struct PreparedData {
  Scaler scaler;
  WindowSet train, val, test;
  std::size_t num_nodes = 0, num_channels = 0;
};

struct PrepareOptions {
  std::size_t lookback = 12;
  std::size_t horizon = 1;
  SplitFractions fractions{};
  std::vector<std::size_t> segment_boundaries;
  bool calendar_features = true;
};

inline PreparedData prepare_data(const SpatioTemporalDataset& raw, const PrepareOptions& opt) {
  const SpatioTemporalDataset ds = opt.calendar_features ? add_calendar_features(raw) : raw;
  const auto splits = split_segments(ds, opt.segment_boundaries, opt.fractions, opt.lookback + opt.horizon);
  std::vector<const SpatioTemporalDataset*> train_parts;
  for (const auto& s : splits) train_parts.push_back(&s.train);
  PreparedData out;
  out.scaler = fit_scaler(train_parts);
  std::vector<WindowSet> tr, va, te;
  for (const auto& s : splits) {
    tr.push_back(make_windows(transform(s.train, out.scaler), opt.lookback, opt.horizon));
    va.push_back(make_windows(transform(s.val, out.scaler), opt.lookback, opt.horizon));
    te.push_back(make_windows(transform(s.test, out.scaler), opt.lookback, opt.horizon));
  }
  out.train = concat_windows(tr);
  out.val = concat_windows(va);
  out.test = concat_windows(te);
  out.num_nodes = ds.num_nodes;
  out.num_channels = ds.num_channels;
  return out;
}

}  // namespace fedstgcrn
