// fedstgcrn command-line tool.
//
//   fedstgcrn generate    --config run.json [--seed N] [--out DIR]
//   fedstgcrn train-local --config run.json [--seed N] [--out DIR]
//   fedstgcrn train-fed   --config run.json [--seed N] [--out DIR] [--transport inproc|socket] [--no-csv]
//   fedstgcrn evaluate    --config run.json --checkpoint FILE [--client ID] [--baseline] [--out DIR]
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "fedstgcrn/cli.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> transport;
  bool no_csv = false;
};

void common_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)")->required();
  cmd->add_option("--seed", o.seed, "Override the run seed");
  cmd->add_option("--out", o.out, "Override the output directory");
}

fedstgcrn::cli::RunConfig resolve(const Overrides& o) {
  auto rc = fedstgcrn::cli::load_run_config(o.config);
  if (o.seed) rc.set_seed(*o.seed);
  if (o.out) rc.output_dir = *o.out;
  if (o.transport) rc.federation.transport = fedstgcrn::parse_transport(*o.transport);
  if (o.no_csv) rc.federation.csv_enabled = false;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace fedstgcrn;
  CLI::App app{"Federated spatiotemporal forecasting with client-side validation"};
  app.require_subcommand(1);
  Overrides o;
  cli::EvaluateOptions eval;
  std::string checkpoint;

  auto* gen = app.add_subcommand("generate", "Write synthetic client datasets as CSV");
  common_flags(gen, o);
  auto* local = app.add_subcommand("train-local", "Train one model per client without federation");
  common_flags(local, o);
  auto* fed = app.add_subcommand("train-fed", "Run the federated training loop");
  common_flags(fed, o);
  fed->add_option("--transport", o.transport, "inproc or socket")->check(CLI::IsMember({"inproc", "socket"}));
  fed->add_flag("--no-csv", o.no_csv, "Adopt the whole aggregate every round (plain FedAvg)");
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a client's test split");
  common_flags(ev, o);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--client", eval.client, "Client id (default: checkpoint file name)");
  ev->add_flag("--baseline", eval.baseline, "Also report the seasonal-naive baseline");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const auto rc = resolve(o);
    cli::Json summary;
    if (*gen) {
      summary = cli::cmd_generate(rc);
    } else if (*local) {
      summary = cli::cmd_train_local(rc);
    } else if (*fed) {
      summary = cli::cmd_train_fed(rc);
    } else {
      eval.checkpoint = checkpoint;
      summary = cli::cmd_evaluate(rc, eval);
    }
    std::cout << summary.dump(2) << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
