// Federated round loop: a coordinating server and M client workers talking
// through Channels. Each round the server distributes the global bundle,
// every client picks which aggregated modules to adopt, trains locally and
// returns its parameters, and the server averages them in client-id order.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedstgcrn/codec.hpp"
#include "fedstgcrn/data.hpp"
#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/federation/aggregate.hpp"
#include "fedstgcrn/federation/csv.hpp"
#include "fedstgcrn/federation/message.hpp"
#include "fedstgcrn/federation/transport.hpp"
#include "fedstgcrn/model.hpp"
#include "fedstgcrn/training.hpp"

namespace fedstgcrn {

enum class TransportKind { InProc, Socket };

inline const char* transport_name(TransportKind t) { return t == TransportKind::InProc ? "inproc" : "socket"; }

inline TransportKind parse_transport(const std::string& s) {
  if (s == "inproc") return TransportKind::InProc;
  if (s == "socket") return TransportKind::Socket;
  throw ConfigError("unknown transport '" + s + "' (expected inproc or socket)");
}

struct FederationConfig {
  std::size_t max_rounds = 50;
  std::size_t local_epochs = 6;
  bool csv_enabled = true;
  TransportKind transport = TransportKind::InProc;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0: any free port
  // Stop once no client's best validation loss improved for this many
  // consecutive rounds; 0 disables.
  std::size_t early_stop_rounds = 10;
  Millis timeout{600000};
  std::uint64_t seed = 42;  // initial global parameters
  // Called by the server after each aggregation with (rounds done, max_rounds).
  std::function<void(std::size_t, std::size_t)> on_round;

  void validate() const {
    if (max_rounds == 0) throw ConfigError("FederationConfig: max_rounds must be at least 1");
    if (timeout.count() <= 0) throw ConfigError("FederationConfig: timeout must be positive");
  }
};

struct ClientSetup {
  std::string id;
  PreparedData data;
  TrainConfig train;  // learning rate, batch size, loss and shuffle seed; max_epochs is ignored
};

struct RoundEpochRecord {
  std::size_t round = 0;
  EpochRecord epoch;
};

template <typename T>
struct ClientState {
  std::string client_id;
  const PreparedData* data = nullptr;
  ModelConfig model;
  TrainConfig train;
  ParamBundle<T> params;
  Checkpoint<T> best;  // val_loss starts at +inf
  std::vector<RoundLog> round_logs;
  std::vector<RoundEpochRecord> curve;
};

template <typename T>
struct ClientOutcome {
  std::string client_id;
  Checkpoint<T> best;
  std::vector<RoundLog> round_logs;
  std::vector<RoundEpochRecord> curve;
  Metrics test;  // of the restored best parameters, original units
};

template <typename T>
struct FederationResult {
  std::vector<ClientOutcome<T>> clients;  // sorted by client id
  std::size_t rounds_run = 0;
  bool stopped_early = false;
  ParamBundle<T> global;  // last aggregate
};

// One client's share of a round, given the distributed global bundle.
// Returns whether the client's best checkpoint improved.
template <typename T>
bool client_round(ClientState<T>& c, const ParamBundle<T>& global, std::size_t round, const FederationConfig& fcfg) {
  const WindowSet& val = c.data->val;
  RoundLog log;
  ParamBundle<T> integrated;
  if (round > 0 && fcfg.csv_enabled) {
    auto csv = csv_validate(c.model, c.params, global, val, c.train.loss);
    integrated = std::move(csv.integrated);
    log = std::move(csv.log);
  } else {
    // Round 0 starts from the global bundle; without CSV every round does.
    integrated = global;
    log.chosen = fcfg.csv_enabled ? ModuleSet::none() : ModuleSet::all();
    log.subset_losses.set(log.chosen, dataset_loss(c.model, integrated, val, c.train.loss));
  }
  log.round = round;
  log.csv_enabled = fcfg.csv_enabled;

  TrainConfig tcfg = c.train;
  tcfg.max_epochs = fcfg.local_epochs;
  LocalTrainOptions opt;
  opt.epoch_offset = round * fcfg.local_epochs;
  opt.early_stopping = false;
  opt.initial_val_loss = log.chosen_loss();
  opt.round = round;
  auto res = train_local(c.model, std::move(integrated), c.data->train, val, tcfg, opt);

  // res.best already covers the integrated starting point and every epoch.
  const bool improved = res.best.val_loss < c.best.val_loss;
  if (improved) c.best = std::move(res.best);
  log.best_val_loss = c.best.val_loss;
  log.post_train_val_loss = res.history.empty() ? log.chosen_loss() : res.history.back().val_loss;
  for (const auto& h : res.history) c.curve.push_back({round, h});
  c.params = std::move(res.params);
  c.params.set_requires_grad(false);
  c.round_logs.push_back(std::move(log));
  return improved;
}

namespace federation_detail {

template <typename T>
void run_client(ClientState<T>& c, Channel& ch, const Manifest& manifest, const FederationConfig& fcfg) {
  ch.send(Message{MessageType::Hello, 0, c.client_id, {}, std::nullopt, encode_manifest(manifest)});
  for (std::uint64_t expected = 0;; ++expected) {
    Message m = ch.receive(fcfg.timeout);
    if (m.type == MessageType::Shutdown) break;
    if (m.type != MessageType::GlobalParams) {
      throw FederationError(c.client_id + ": unexpected " + std::string(message_type_name(m.type)));
    }
    if (m.round != expected) {
      throw FederationError(c.client_id + ": expected round " + std::to_string(expected) + ", got " +
                            std::to_string(m.round));
    }
    const auto global = deserialize_params<T>(m.payload, manifest);
    const bool improved = client_round(c, global, m.round, fcfg);
    ch.send(Message{MessageType::LocalParams, m.round, c.client_id, {}, std::nullopt, serialize_params(c.params)});
    ch.send(Message{MessageType::RoundDone, m.round, c.client_id, {}, improved, {}});
  }
}

struct ServerPeer {
  std::string id;
  Channel* channel;
};

template <typename T>
Message expect(const ServerPeer& peer, MessageType type, std::uint64_t round, const FederationConfig& fcfg) {
  Message m;
  try {
    m = peer.channel->receive(fcfg.timeout);
  } catch (const FederationError& e) {
    throw FederationError("round " + std::to_string(round) + " aborted: client '" + peer.id + "': " + e.what());
  }
  if (m.type != type || m.round != round || m.sender != peer.id) {
    throw FederationError("round " + std::to_string(round) + " aborted: client '" + peer.id + "' sent " +
                          std::string(message_type_name(m.type)) + " for round " + std::to_string(m.round) +
                          ", expected " + std::string(message_type_name(type)));
  }
  return m;
}

// Server side. `channels` are in arbitrary order; HELLO names each peer.
template <typename T>
FederationResult<T> run_server(std::vector<Channel*> channels, ParamBundle<T> global, const FederationConfig& fcfg) {
  const Manifest manifest = global.manifest();
  std::vector<ServerPeer> peers;
  for (Channel* ch : channels) {
    Message hello = ch->receive(fcfg.timeout);
    if (hello.type != MessageType::Hello) throw FederationError("expected HELLO from a new client");
    require_same_manifest(manifest, decode_manifest(hello.payload), "HELLO from client '" + hello.sender + "'");
    peers.push_back({hello.sender, ch});
  }
  std::sort(peers.begin(), peers.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < peers.size(); ++i) {
    if (peers[i].id == peers[i - 1].id) throw FederationError("duplicate client id '" + peers[i].id + "'");
  }

  FederationResult<T> result;
  std::size_t quiet_rounds = 0;
  for (std::size_t r = 0; r < fcfg.max_rounds; ++r) {
    const Bytes payload = serialize_params(global);
    for (const auto& p : peers) p.channel->send(Message{MessageType::GlobalParams, r, "server", {}, std::nullopt, payload});
    std::vector<ParamBundle<T>> locals;
    bool any_improved = false;
    for (const auto& p : peers) {
      const Message local = expect<T>(p, MessageType::LocalParams, r, fcfg);
      locals.push_back(deserialize_params<T>(local.payload, manifest));
      any_improved = *expect<T>(p, MessageType::RoundDone, r, fcfg).improved || any_improved;
    }
    global = fedavg_aggregate<T>(locals);
    result.rounds_run = r + 1;
    if (fcfg.on_round) fcfg.on_round(result.rounds_run, fcfg.max_rounds);
    quiet_rounds = any_improved ? 0 : quiet_rounds + 1;
    if (fcfg.early_stop_rounds > 0 && quiet_rounds >= fcfg.early_stop_rounds) {
      result.stopped_early = result.rounds_run < fcfg.max_rounds;
      break;
    }
  }
  for (const auto& p : peers) p.channel->send(Message{MessageType::Shutdown, result.rounds_run, "server", {}, std::nullopt, {}});
  result.global = std::move(global);
  return result;
}

}  // namespace federation_detail

// Runs the whole federation. Clients execute in worker threads over the
// configured transport; any failure aborts the run with no partial round.
// The input width comes from the clients' data and must agree across them;
// base.num_nodes and base.input_dim are ignored.
template <typename T>
FederationResult<T> run_federation(const ModelConfig& model, const std::vector<ClientSetup>& setups,
                                   const FederationConfig& fcfg) {
  fcfg.validate();
  if (setups.empty()) throw ConfigError("run_federation: no clients");
  ModelConfig base = model;
  base.input_dim = setups.front().data.num_channels;
  for (const auto& s : setups) {
    if (s.data.num_channels != base.input_dim) {
      throw ConfigError("run_federation: client '" + s.id + "' has " + std::to_string(s.data.num_channels) +
                        " input channels, client '" + setups.front().id + "' has " + std::to_string(base.input_dim));
    }
  }
  base.validate();

  std::vector<ClientState<T>> states(setups.size());
  for (std::size_t i = 0; i < setups.size(); ++i) {
    auto& s = states[i];
    s.client_id = setups[i].id;
    s.data = &setups[i].data;
    s.model = base;
    s.model.num_nodes = setups[i].data.num_nodes;
    s.model.input_dim = setups[i].data.num_channels;
    s.model.validate();
    s.train = setups[i].train;
    s.train.max_epochs = fcfg.local_epochs;
    s.train.validate(false);
  }
  ParamBundle<T> global = init_params<T>(base, fcfg.seed);
  global.set_requires_grad(false);
  const Manifest manifest = global.manifest();

  std::vector<std::unique_ptr<Channel>> server_ends(setups.size()), client_ends(setups.size());
  std::unique_ptr<SocketListener> listener;
  if (fcfg.transport == TransportKind::InProc) {
    for (std::size_t i = 0; i < setups.size(); ++i) std::tie(server_ends[i], client_ends[i]) = make_inproc_pair();
  } else {
    listener = std::make_unique<SocketListener>(fcfg.host, fcfg.port);
  }

  std::vector<std::exception_ptr> client_errors(setups.size());
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < setups.size(); ++i) {
    workers.emplace_back([&, i] {
      try {
        if (!client_ends[i]) client_ends[i] = connect_socket(fcfg.host, listener->port(), fcfg.timeout);
        federation_detail::run_client(states[i], *client_ends[i], manifest, fcfg);
        states[i].best.params.set_requires_grad(false);
        // Restore the best checkpoint and score it on the held-out split.
        states[i].params = states[i].best.params;
      } catch (...) {
        client_errors[i] = std::current_exception();
      }
      if (client_ends[i]) client_ends[i]->close();
    });
  }

  FederationResult<T> result;
  std::exception_ptr server_error;
  try {
    if (listener) {
      for (auto& end : server_ends) end = listener->accept(fcfg.timeout);
    }
    std::vector<Channel*> raw;
    for (auto& end : server_ends) raw.push_back(end.get());
    result = federation_detail::run_server<T>(raw, std::move(global), fcfg);
  } catch (...) {
    server_error = std::current_exception();
    for (auto& end : server_ends)
      if (end) end->close();
  }
  for (auto& w : workers) w.join();

  // Report the root cause: a client's own failure over the disconnects it causes.
  for (const auto& e : client_errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const FederationError&) {
    } catch (...) {
      throw;
    }
  }
  if (server_error) std::rethrow_exception(server_error);
  for (const auto& e : client_errors)
    if (e) std::rethrow_exception(e);

  for (auto& s : states) {
    ClientOutcome<T> out;
    out.client_id = s.client_id;
    out.test = evaluate(s.model, s.best.params, s.data->test, s.data->scaler);
    out.best = std::move(s.best);
    out.round_logs = std::move(s.round_logs);
    out.curve = std::move(s.curve);
    result.clients.push_back(std::move(out));
  }
  std::sort(result.clients.begin(), result.clients.end(),
            [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  return result;
}

}  // namespace fedstgcrn
