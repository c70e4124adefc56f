// Subcommand implementations. Each returns the JSON summary it wrote.
#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedstgcrn/cli/config.hpp"
#include "fedstgcrn/cli/reports.hpp"
#include "fedstgcrn/data.hpp"
#include "fedstgcrn/federation/federation.hpp"
#include "fedstgcrn/model.hpp"
#include "fedstgcrn/training.hpp"

namespace fedstgcrn::cli {

using Real = float;  // training precision
using Json = nlohmann::ordered_json;

// Progress goes to stderr so stdout stays machine-readable.
inline void note(const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); }

inline SpatioTemporalDataset load_client_dataset(const ClientConfig& c) {
  if (c.synthetic) return generate_synthetic(*c.synthetic);
  auto loaded = load_csv(c.csv->path.string(), c.csv->schema);
  if (loaded.missing_cells > 0) {
    note("client '" + c.id + "': " + std::to_string(loaded.missing_cells) + " missing cells zero-filled (" +
         fmt_num(loaded.missing_fraction) + " of the grid)");
  }
  return std::move(loaded.dataset);
}

// Loads and windows one client's data. Data problems found here (short
// segments, malformed files) are configuration errors: nothing has trained.
inline PreparedData prepare_client(const RunConfig& rc, const ClientConfig& c) {
  try {
    PrepareOptions po;
    po.lookback = rc.model.lookback;
    po.horizon = rc.model.horizon;
    po.fractions = rc.fractions;
    po.segment_boundaries = c.segment_boundaries;
    po.calendar_features = rc.calendar_features;
    PreparedData pd = prepare_data(load_client_dataset(c), po);
    for (const auto& w : pd.scaler.warnings) note("client '" + c.id + "': " + w);
    return pd;
  } catch (const DataError& e) {
    throw ConfigError("client '" + c.id + "': " + e.what());
  }
}

inline std::vector<PreparedData> prepare_all(const RunConfig& rc) {
  std::vector<PreparedData> out;
  for (const auto& c : rc.clients) out.push_back(prepare_client(rc, c));
  return out;
}

inline ModelConfig client_model(const RunConfig& rc, const PreparedData& pd) {
  ModelConfig m = rc.model;
  m.num_nodes = pd.num_nodes;
  m.input_dim = pd.num_channels;
  return m;
}

inline std::filesystem::path checkpoint_path(const RunConfig& rc, const std::string& client) {
  return rc.output_dir / "checkpoints" / (client + ".ckpt");
}

inline Json metrics_json(const Metrics& m) { return Json{{"mae", m.mae}, {"rmse", m.rmse}, {"count", m.count}}; }

// ---------------------------------------------------------------------------

inline Json cmd_generate(const RunConfig& rc) {
  rc.validate();
  Json summary{{"command", "generate"}, {"seed", rc.seed}, {"files", Json::array()}};
  for (const auto& c : rc.clients) {
    if (!c.synthetic) {
      note("client '" + c.id + "': csv source, nothing to generate");
      continue;
    }
    const auto ds = generate_synthetic(*c.synthetic);
    std::ostringstream text;
    write_csv(text, ds);
    const auto path = rc.output_dir / "data" / (c.id + ".csv");
    write_file(path, text.str());
    summary["files"].push_back(
        Json{{"client", c.id}, {"path", "data/" + c.id + ".csv"},
             {"rows", ds.num_steps * ds.num_nodes}, {"seed", c.synthetic->seed}});
  }
  write_file(rc.output_dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

inline Json cmd_train_local(const RunConfig& rc) {
  rc.validate();
  const auto data = prepare_all(rc);
  Table metrics({"client", "mae", "rmse"});
  Table curves({"client", "epoch", "train_loss", "val_loss"});
  Json clients = Json::array();
  for (std::size_t i = 0; i < rc.clients.size(); ++i) {
    const auto& c = rc.clients[i];
    const ModelConfig model = client_model(rc, data[i]);
    TrainConfig tcfg = rc.train;
    tcfg.seed = rc.client_seed(c);
    note("client '" + c.id + "': training locally");
    auto res = train_local(model, init_params<Real>(model, rc.seed), data[i].train, data[i].val, tcfg);
    const Metrics m = evaluate(model, res.best.params, data[i].test, data[i].scaler);
    metrics.row({c.id, fmt_num(m.mae), fmt_num(m.rmse)});
    for (const auto& h : res.history) {
      curves.row({c.id, std::to_string(h.epoch), fmt_num(h.train_loss), fmt_num(h.val_loss)});
    }
    save_checkpoint(checkpoint_path(rc, c.id), res.best);
    clients.push_back(Json{{"id", c.id},
                           {"test", metrics_json(m)},
                           {"best_val_loss", res.best.val_loss},
                           {"best_epoch", res.best.epoch},
                           {"epochs_run", res.history.size()},
                           {"stopped_early", res.stopped_early}});
  }
  write_file(rc.output_dir / "metrics.csv", metrics.str());
  write_file(rc.output_dir / "curves.csv", curves.str());
  Json summary{{"command", "train-local"}, {"seed", rc.seed}, {"clients", clients}};
  write_file(rc.output_dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

inline Json cmd_train_fed(const RunConfig& rc) {
  rc.validate();
  const auto data = prepare_all(rc);
  std::vector<ClientSetup> setups;
  for (std::size_t i = 0; i < rc.clients.size(); ++i) {
    TrainConfig tcfg = rc.train;
    tcfg.seed = rc.client_seed(rc.clients[i]);
    setups.push_back(ClientSetup{rc.clients[i].id, data[i], tcfg});
  }
  FederationConfig fcfg = rc.federation;
  fcfg.on_round = [](std::size_t done, std::size_t max) {
    note("round " + std::to_string(done) + "/" + std::to_string(max) + " aggregated");
  };
  const auto result = run_federation<Real>(rc.model, setups, fcfg);

  Table metrics({"client", "mae", "rmse"});
  Table curves({"client", "round", "epoch", "train_loss", "val_loss"});
  Table losses({"client", "round", "subset", "val_loss", "chosen"});
  Table rounds({"client", "round", "chosen", "chosen_val_loss", "post_train_val_loss", "best_val_loss"});
  Table replacement({"client", "round", "lstm_replaced", "attention_replaced", "agcrn_replaced"});
  Json clients = Json::array();
  for (const auto& c : result.clients) {
    metrics.row({c.client_id, fmt_num(c.test.mae), fmt_num(c.test.rmse)});
    for (const auto& e : c.curve) {
      curves.row({c.client_id, std::to_string(e.round), std::to_string(e.epoch.epoch), fmt_num(e.epoch.train_loss),
                  fmt_num(e.epoch.val_loss)});
    }
    for (const auto& log : c.round_logs) {
      const std::string r = std::to_string(log.round);
      for (ModuleSet s : subsets_in_tie_order()) {
        if (const auto v = log.subset_losses[s]) {
          losses.row({c.client_id, r, s.to_string(), fmt_num(*v), s == log.chosen ? "1" : "0"});
        }
      }
      rounds.row({c.client_id, r, log.chosen.to_string(), fmt_num(log.chosen_loss()), fmt_num(log.post_train_val_loss),
                  fmt_num(log.best_val_loss)});
      auto flag = [&](ModuleId id) { return log.chosen.contains(id) ? "1" : "0"; };
      replacement.row({c.client_id, r, flag(ModuleId::Lstm), flag(ModuleId::Attention), flag(ModuleId::Agcrn)});
    }
    save_checkpoint(checkpoint_path(rc, c.client_id), c.best);
    clients.push_back(Json{{"id", c.client_id},
                           {"test", metrics_json(c.test)},
                           {"best_val_loss", c.best.val_loss},
                           {"best_round", c.best.round},
                           {"best_epoch", c.best.epoch}});
  }
  write_file(rc.output_dir / "metrics.csv", metrics.str());
  write_file(rc.output_dir / "curves.csv", curves.str());
  write_file(rc.output_dir / "round_losses.csv", losses.str());
  write_file(rc.output_dir / "rounds.csv", rounds.str());
  write_file(rc.output_dir / "replacement_map.csv", replacement.str());
  Json summary{{"command", "train-fed"},
               {"seed", rc.seed},
               {"csv", rc.federation.csv_enabled},
               {"transport", transport_name(rc.federation.transport)},
               {"rounds_run", result.rounds_run},
               {"stopped_early", result.stopped_early},
               {"clients", clients}};
  write_file(rc.output_dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

struct EvaluateOptions {
  std::filesystem::path checkpoint;
  std::string client;  // empty: the checkpoint's file stem
  bool baseline = false;
};

inline Json cmd_evaluate(const RunConfig& rc, const EvaluateOptions& opt) {
  rc.validate();
  const std::string id = opt.client.empty() ? opt.checkpoint.stem().string() : opt.client;
  const ClientConfig* client = nullptr;
  for (const auto& c : rc.clients)
    if (c.id == id) client = &c;
  if (client == nullptr) throw ConfigError("evaluate: no client named '" + id + "' in the config");
  if (!std::filesystem::exists(opt.checkpoint)) throw ConfigError("evaluate: checkpoint not found: " + opt.checkpoint.string());

  const PreparedData pd = prepare_client(rc, *client);
  const ModelConfig model = client_model(rc, pd);
  const auto ck = load_checkpoint<Real>(opt.checkpoint, make_manifest(model, dtype_of<Real>()));
  const Metrics m = evaluate(model, ck.params, pd.test, pd.scaler);

  Table table({"client", "predictor", "mae", "rmse"});
  table.row({id, "model", fmt_num(m.mae), fmt_num(m.rmse)});
  Json summary{{"command", "evaluate"}, {"client", id}, {"checkpoint_val_loss", ck.val_loss}, {"test", metrics_json(m)}};
  if (opt.baseline) {
    const Metrics b = seasonal_naive_baseline(pd.test, pd.scaler, rc.season);
    table.row({id, "seasonal_naive", fmt_num(b.mae), fmt_num(b.rmse)});
    summary["baseline"] = metrics_json(b);
    summary["season"] = rc.season;
  }
  write_file(rc.output_dir / ("evaluate_" + id + ".csv"), table.str());
  return summary;
}

}  // namespace fedstgcrn::cli
