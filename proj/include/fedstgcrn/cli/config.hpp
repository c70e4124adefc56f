// Run configuration: one JSON document with a schema_version field.
//
// {
//   "schema_version": 1,
//   "seed": 42,
//   "output_dir": "runs/default",
//   "model":      {"hidden_dim": 8, "embed_dim": 8, "num_heads": 2, "lookback": 24, "horizon": 1},
//   "train":      {"learning_rate": 0.001, "batch_size": 16, "max_epochs": 100, "patience": 10,
//                  "loss": "MAE", "clip_norm": null},
//   "federation": {"rounds": 15, "local_epochs": 4, "csv": true, "transport": "inproc",
//                  "host": "127.0.0.1", "port": 0, "early_stop_rounds": 10, "timeout_seconds": 600},
//   "data":       {"fractions": [0.7, 0.2, 0.1], "calendar_features": true, "season": 24},
//   "clients": [
//     {"id": "north", "seed_offset": 0, "synthetic": {"num_nodes": 6, "num_steps": 720, "exog_channels": 2}},
//     {"id": "depot", "csv": {"path": "depot.csv", "time_col": "timestamp", "node_col": "node",
//                             "value_col": "value", "exog_cols": ["temp"]},
//      "segment_boundaries": [400]}
//   ]
// }
//
// Every section and key is optional except "clients". Unknown keys are
// rejected. Relative paths resolve against the config file's directory.
// A client's data seed and shuffle seed are seed + seed_offset (default: the
// client's index); the initial global parameters use seed itself.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedstgcrn/data.hpp"
#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/federation/federation.hpp"
#include "fedstgcrn/model.hpp"
#include "fedstgcrn/training.hpp"

namespace fedstgcrn::cli {

inline constexpr int kSchemaVersion = 1;

struct CsvSource {
  std::filesystem::path path;
  CsvSchema schema;
};

struct ClientConfig {
  std::string id;
  std::uint64_t seed_offset = 0;
  std::optional<SyntheticSpec> synthetic;  // seed filled in from the run seed
  std::optional<CsvSource> csv;
  std::vector<std::size_t> segment_boundaries;
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::filesystem::path output_dir = "runs";
  ModelConfig model;  // num_nodes and input_dim are per client
  TrainConfig train;
  FederationConfig federation;
  SplitFractions fractions;
  bool calendar_features = true;
  std::size_t season = 24;
  std::vector<ClientConfig> clients;

  std::uint64_t client_seed(const ClientConfig& c) const { return seed + c.seed_offset; }
  // Applies the run seed to every seeded component.
  void set_seed(std::uint64_t s);
  void validate() const;
};

namespace config_detail {

using nlohmann::json;

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline std::size_t read_size(const json& j, const char* key, std::size_t fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(where + "." + key + ": expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

inline ModelConfig parse_model(const json& j) {
  const std::string w = "model";
  check_keys(j, {"hidden_dim", "embed_dim", "num_heads", "lookback", "horizon"}, w);
  ModelConfig m;
  m.hidden_dim = read_size(j, "hidden_dim", m.hidden_dim, w);
  m.embed_dim = read_size(j, "embed_dim", m.embed_dim, w);
  m.num_heads = read_size(j, "num_heads", m.num_heads, w);
  m.lookback = read_size(j, "lookback", m.lookback, w);
  m.horizon = read_size(j, "horizon", m.horizon, w);
  return m;
}

inline TrainConfig parse_train(const json& j) {
  const std::string w = "train";
  check_keys(j, {"learning_rate", "batch_size", "max_epochs", "patience", "loss", "clip_norm"}, w);
  TrainConfig t;
  read(j, "learning_rate", t.learning_rate, w);
  t.batch_size = read_size(j, "batch_size", t.batch_size, w);
  t.max_epochs = read_size(j, "max_epochs", t.max_epochs, w);
  t.patience = read_size(j, "patience", t.patience, w);
  std::string loss = loss_name(t.loss);
  read(j, "loss", loss, w);
  if (loss == "MAE") {
    t.loss = LossKind::MAE;
  } else if (loss == "MSE") {
    t.loss = LossKind::MSE;
  } else {
    throw ConfigError("train.loss: expected MAE or MSE, got '" + loss + "'");
  }
  if (j.contains("clip_norm") && !j.at("clip_norm").is_null()) {
    double c = 0.0;
    read(j, "clip_norm", c, w);
    t.clip_norm = c;
  }
  return t;
}

inline FederationConfig parse_federation(const json& j) {
  const std::string w = "federation";
  check_keys(j, {"rounds", "local_epochs", "csv", "transport", "host", "port", "early_stop_rounds", "timeout_seconds"}, w);
  FederationConfig f;
  f.max_rounds = read_size(j, "rounds", f.max_rounds, w);
  f.local_epochs = read_size(j, "local_epochs", f.local_epochs, w);
  read(j, "csv", f.csv_enabled, w);
  std::string transport = transport_name(f.transport);
  read(j, "transport", transport, w);
  f.transport = parse_transport(transport);
  read(j, "host", f.host, w);
  const std::size_t port = read_size(j, "port", f.port, w);
  if (port > 65535) throw ConfigError("federation.port: out of range");
  f.port = static_cast<std::uint16_t>(port);
  f.early_stop_rounds = read_size(j, "early_stop_rounds", f.early_stop_rounds, w);
  double timeout = static_cast<double>(f.timeout.count()) / 1000.0;
  read(j, "timeout_seconds", timeout, w);
  if (!(timeout > 0.0)) throw ConfigError("federation.timeout_seconds: must be positive");
  f.timeout = Millis(static_cast<long long>(timeout * 1000.0));
  return f;
}

inline SyntheticSpec parse_synthetic(const json& j, const std::string& w) {
  check_keys(j, {"num_nodes", "num_steps", "exog_channels", "daily_period", "weekly_period", "noise_sd", "coupling",
                 "start_time", "interval_seconds"},
             w);
  SyntheticSpec s;
  s.num_nodes = read_size(j, "num_nodes", s.num_nodes, w);
  s.num_steps = read_size(j, "num_steps", s.num_steps, w);
  s.exog_channels = read_size(j, "exog_channels", s.exog_channels, w);
  s.daily_period = read_size(j, "daily_period", s.daily_period, w);
  s.weekly_period = read_size(j, "weekly_period", s.weekly_period, w);
  read(j, "noise_sd", s.noise_sd, w);
  read(j, "coupling", s.coupling, w);
  if (j.contains("start_time")) {
    std::string start;
    read(j, "start_time", start, w);
    try {
      s.start_time = parse_iso8601(start);
    } catch (const DataError& e) {
      throw ConfigError(w + ".start_time: " + e.what());
    }
  }
  s.interval_seconds = static_cast<std::int64_t>(read_size(j, "interval_seconds", 3600, w));
  return s;
}

inline CsvSource parse_csv_source(const json& j, const std::filesystem::path& base, const std::string& w) {
  check_keys(j, {"path", "time_col", "node_col", "value_col", "exog_cols"}, w);
  CsvSource c;
  std::string path;
  read(j, "path", path, w);
  if (path.empty()) throw ConfigError(w + ".path: required");
  c.path = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path) : base / path;
  read(j, "time_col", c.schema.time_col, w);
  read(j, "node_col", c.schema.node_col, w);
  read(j, "value_col", c.schema.value_col, w);
  read(j, "exog_cols", c.schema.exog_cols, w);
  return c;
}

}  // namespace config_detail

inline void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  federation.seed = s;
  train.seed = s;
  for (auto& c : clients)
    if (c.synthetic) c.synthetic->seed = client_seed(c);
}

inline void RunConfig::validate() const {
  if (clients.empty()) throw ConfigError("config: at least one client is required");
  std::set<std::string> ids;
  for (const auto& c : clients) {
    if (c.id.empty()) throw ConfigError("config: client id must not be empty");
    try {
      message_detail::check_sender(c.id);
    } catch (const CodecError&) {
      throw ConfigError("config: client id '" + c.id + "' may only use [A-Za-z0-9_.-]");
    }
    if (!ids.insert(c.id).second) throw ConfigError("config: duplicate client id '" + c.id + "'");
    if (c.synthetic.has_value() == c.csv.has_value()) {
      throw ConfigError("client '" + c.id + "': exactly one of synthetic or csv is required");
    }
    if (c.csv && !std::filesystem::exists(c.csv->path)) {
      throw ConfigError("client '" + c.id + "': data file not found: " + c.csv->path.string());
    }
    if (c.synthetic) {
      try {
        c.synthetic->validate();
      } catch (const DataError& e) {
        throw ConfigError("client '" + c.id + "': " + e.what());
      }
    }
  }
  ModelConfig probe = model;
  probe.num_nodes = 1;
  probe.input_dim = 1;
  probe.validate();
  train.validate();
  federation.validate();
  const double total = fractions.train + fractions.val + fractions.test;
  if (!(fractions.train > 0 && fractions.val > 0 && fractions.test > 0) || std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("data.fractions: need three positive parts summing to 1");
  }
  if (season == 0 || season > model.lookback) {
    throw ConfigError("data.season: must lie in [1, lookback=" + std::to_string(model.lookback) + "]");
  }
}

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  using namespace config_detail;
  check_keys(j, {"schema_version", "seed", "output_dir", "model", "train", "federation", "data", "clients"}, "config");
  int version = 0;
  read(j, "schema_version", version, "config");
  if (version != kSchemaVersion) {
    throw ConfigError("config: schema_version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  RunConfig rc;
  read(j, "seed", rc.seed, "config");
  std::string out = rc.output_dir.string();
  read(j, "output_dir", out, "config");
  rc.output_dir = std::filesystem::path(out).is_absolute() ? std::filesystem::path(out) : base_dir / out;
  if (j.contains("model")) rc.model = parse_model(j.at("model"));
  if (j.contains("train")) rc.train = parse_train(j.at("train"));
  if (j.contains("federation")) rc.federation = parse_federation(j.at("federation"));
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"fractions", "calendar_features", "season"}, "data");
    if (d.contains("fractions")) {
      std::vector<double> f;
      read(d, "fractions", f, "data");
      if (f.size() != 3) throw ConfigError("data.fractions: expected [train, val, test]");
      rc.fractions = SplitFractions{f[0], f[1], f[2]};
    }
    read(d, "calendar_features", rc.calendar_features, "data");
    rc.season = read_size(d, "season", rc.season, "data");
  }
  if (!j.contains("clients") || !j.at("clients").is_array()) throw ConfigError("config: 'clients' array is required");
  std::size_t index = 0;
  for (const auto& cj : j.at("clients")) {
    const std::string w = "clients[" + std::to_string(index) + "]";
    check_keys(cj, {"id", "seed_offset", "synthetic", "csv", "segment_boundaries"}, w);
    ClientConfig c;
    read(cj, "id", c.id, w);
    c.seed_offset = read_size(cj, "seed_offset", index, w);
    if (cj.contains("synthetic")) c.synthetic = parse_synthetic(cj.at("synthetic"), w + ".synthetic");
    if (cj.contains("csv")) c.csv = parse_csv_source(cj.at("csv"), base_dir, w + ".csv");
    read(cj, "segment_boundaries", c.segment_boundaries, w);
    rc.clients.push_back(std::move(c));
    ++index;
  }
  rc.set_seed(rc.seed);
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

}  // namespace fedstgcrn::cli
