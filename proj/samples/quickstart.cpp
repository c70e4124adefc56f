// Two synthetic clients with different node counts, a short federation, and
// the per-round module replacement choices.
#include <cstdio>

#include "fedstgcrn.hpp"

int main() {
  using namespace fedstgcrn;

  ModelConfig model;
  model.hidden_dim = 8;
  model.embed_dim = 8;
  model.num_heads = 2;
  model.lookback = 24;

  std::vector<ClientSetup> clients;
  for (std::size_t nodes : {4, 7}) {
    SyntheticSpec spec;
    spec.num_nodes = nodes;
    spec.num_steps = 480;
    spec.seed = 100 + nodes;
    PrepareOptions prep;
    prep.lookback = model.lookback;
    ClientSetup c;
    c.id = "city" + std::to_string(nodes);
    c.data = prepare_data(generate_synthetic(spec), prep);
    c.train.learning_rate = 1e-3;
    c.train.seed = spec.seed;
    clients.push_back(std::move(c));
  }

  FederationConfig fed;
  fed.max_rounds = 4;
  fed.local_epochs = 2;
  const auto result = run_federation<float>(model, clients, fed);

  for (std::size_t i = 0; i < result.clients.size(); ++i) {
    const auto& c = result.clients[i];
    const Metrics naive = seasonal_naive_baseline(clients[i].data.test, clients[i].data.scaler, 24);
    std::printf("%s  test MAE %.4f  RMSE %.4f  (seasonal naive MAE %.4f)\n", c.client_id.c_str(), c.test.mae,
                c.test.rmse, naive.mae);
    for (const auto& log : c.round_logs) {
      std::printf("  round %zu  adopted %-28s val %.5f -> %.5f\n", log.round, log.chosen.to_string().c_str(),
                  log.chosen_loss(), log.post_train_val_loss);
    }
  }
}
