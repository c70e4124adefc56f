#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "fedstgcrn/cli.hpp"

using namespace fedstgcrn;
using namespace fedstgcrn::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class ScratchDir {
 public:
  ScratchDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            ("fedstgcrn_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

json smoke_json() {
  return json::parse(R"({
    "schema_version": 1,
    "seed": 3,
    "output_dir": "out",
    "model": {"hidden_dim": 4, "embed_dim": 4, "num_heads": 1, "lookback": 6, "horizon": 2},
    "train": {"learning_rate": 0.003, "batch_size": 32, "max_epochs": 2, "patience": 2},
    "federation": {"rounds": 2, "local_epochs": 1},
    "data": {"season": 6},
    "clients": [
      {"id": "alpha", "synthetic": {"num_nodes": 3, "num_steps": 340}},
      {"id": "beta", "synthetic": {"num_nodes": 5, "num_steps": 340}}
    ]
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::vector<std::string>> read_table(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

void expect_config_error(json j, const std::string& fragment) {
  try {
    parse_run_config(j, ".").validate();
    FAIL() << "expected ConfigError mentioning " << fragment;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(FEDSTGCRN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, ParsesAndResolvesPaths) {
  const auto rc = parse_run_config(smoke_json(), "/base");
  EXPECT_EQ(rc.output_dir, fs::path("/base/out"));
  ASSERT_EQ(rc.clients.size(), 2u);
  EXPECT_EQ(rc.clients[1].seed_offset, 1u);
  EXPECT_EQ(rc.clients[0].synthetic->seed, 3u);
  EXPECT_EQ(rc.clients[1].synthetic->seed, 4u);
  EXPECT_EQ(rc.federation.seed, 3u);
  EXPECT_EQ(rc.model.horizon, 2u);
  EXPECT_NO_THROW(rc.validate());
}

TEST(Config, SeedOverridePropagates) {
  auto rc = parse_run_config(smoke_json(), ".");
  rc.set_seed(100);
  EXPECT_EQ(rc.federation.seed, 100u);
  EXPECT_EQ(rc.clients[1].synthetic->seed, 101u);
}

TEST(Config, Rejections) {
  auto j = smoke_json();
  j["schema_version"] = 2;
  expect_config_error(j, "schema_version");
  j = smoke_json();
  j.erase("schema_version");
  expect_config_error(j, "schema_version");
  j = smoke_json();
  j["model"]["hiden_dim"] = 3;
  expect_config_error(j, "hiden_dim");
  j = smoke_json();
  j["clients"][1]["id"] = "alpha";
  expect_config_error(j, "duplicate client id");
  j = smoke_json();
  j["clients"][0]["id"] = "a/b";
  expect_config_error(j, "a/b");
  j = smoke_json();
  j["clients"][0]["csv"] = {{"path", "nowhere.csv"}};
  expect_config_error(j, "exactly one");
  j = smoke_json();
  j["clients"][0].erase("synthetic");
  j["clients"][0]["csv"] = {{"path", "nowhere.csv"}};
  expect_config_error(j, "not found");
  j = smoke_json();
  j["data"]["fractions"] = {0.5, 0.5, 0.5};
  expect_config_error(j, "fractions");
  j = smoke_json();
  j["data"]["season"] = 7;
  expect_config_error(j, "season");
  j = smoke_json();
  j["train"]["loss"] = "Huber";
  expect_config_error(j, "Huber");
  j = smoke_json();
  j["federation"]["transport"] = "udp";
  expect_config_error(j, "udp");
  j = smoke_json();
  j["model"]["hidden_dim"] = -1;
  expect_config_error(j, "hidden_dim");
  j = smoke_json();
  j.erase("clients");
  expect_config_error(j, "clients");
}

TEST(Generate, DeterministicFilesWithExpectedRows) {
  ScratchDir dir;
  auto rc = parse_run_config(smoke_json(), dir.path());
  const auto summary = cmd_generate(rc);
  ASSERT_EQ(summary["files"].size(), 2u);
  EXPECT_EQ(summary["files"][0]["rows"], 340u * 3);
  const auto first = slurp(dir.path() / "out/data/alpha.csv");
  EXPECT_EQ(read_table(dir.path() / "out/data/beta.csv").size(), 1u + 340 * 5);
  cmd_generate(rc);
  EXPECT_EQ(slurp(dir.path() / "out/data/alpha.csv"), first);
  rc.set_seed(4);
  cmd_generate(rc);
  EXPECT_NE(slurp(dir.path() / "out/data/alpha.csv"), first);
}

TEST(Generate, CsvClientsReadBackTheGeneratedFiles) {
  ScratchDir dir;
  auto gen = parse_run_config(smoke_json(), dir.path());
  cmd_generate(gen);
  auto j = smoke_json();
  for (auto& c : j["clients"]) {
    const std::string id = c["id"];
    c.erase("synthetic");
    c["csv"] = {{"path", "out/data/" + id + ".csv"}, {"exog_cols", {"temperature_0", "precipitation_0"}}};
  }
  const auto from_csv = parse_run_config(j, dir.path());
  const auto a = prepare_client(gen, gen.clients[0]);
  const auto b = prepare_client(from_csv, from_csv.clients[0]);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.test.targets, b.test.targets);
}

TEST(TrainLocal, OneRecordPerClientAndRepeatable) {
  ScratchDir dir;
  const auto rc = parse_run_config(smoke_json(), dir.path());
  const auto summary = cmd_train_local(rc);
  const auto metrics = read_table(dir.path() / "out/metrics.csv");
  ASSERT_EQ(metrics.size(), 3u);
  EXPECT_EQ(metrics[0], (std::vector<std::string>{"client", "mae", "rmse"}));
  for (std::size_t i = 1; i < metrics.size(); ++i) EXPECT_GE(std::stod(metrics[i][2]), std::stod(metrics[i][1]));
  EXPECT_TRUE(fs::exists(dir.path() / "out/checkpoints/alpha.ckpt"));
  const auto before = slurp(dir.path() / "out/metrics.csv");
  const auto curves = slurp(dir.path() / "out/curves.csv");
  cmd_train_local(rc);
  EXPECT_EQ(slurp(dir.path() / "out/metrics.csv"), before);
  EXPECT_EQ(slurp(dir.path() / "out/curves.csv"), curves);
  EXPECT_EQ(summary["clients"].size(), 2u);
}

TEST(TrainFed, ReportsAreConsistent) {
  ScratchDir dir;
  const auto rc = parse_run_config(smoke_json(), dir.path());
  const auto summary = cmd_train_fed(rc);
  const std::size_t R = summary["rounds_run"];
  EXPECT_EQ(R, 2u);
  const auto map = read_table(dir.path() / "out/replacement_map.csv");
  ASSERT_EQ(map.size(), 1u + 2 * R);
  const auto rounds = read_table(dir.path() / "out/rounds.csv");
  ASSERT_EQ(rounds.size(), map.size());
  const auto losses = read_table(dir.path() / "out/round_losses.csv");
  // one row per scored subset: 1 at round 0, 8 afterwards
  EXPECT_EQ(losses.size(), 1u + 2 * (1 + 8 * (R - 1)));
  for (const auto* t : {&map, &rounds, &losses})
    for (const auto& row : *t) EXPECT_EQ(row.size(), t->front().size());
  for (std::size_t i = 1; i < rounds.size(); ++i) {
    const auto& r = rounds[i];
    const auto& m = map[i];
    EXPECT_EQ(r[0], m[0]);
    EXPECT_EQ(r[1], m[1]);
    // chosen set and its flags agree
    EXPECT_EQ(r[2].find("lstm") != std::string::npos, m[2] == "1");
    EXPECT_EQ(r[2].find("attention") != std::string::npos, m[3] == "1");
    EXPECT_EQ(r[2].find("agcrn") != std::string::npos, m[4] == "1");
    EXPECT_LE(std::stod(r[5]), std::stod(r[3]));
  }
  std::size_t chosen_rows = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) chosen_rows += losses[i][4] == "1";
  EXPECT_EQ(chosen_rows, 2 * R);
  EXPECT_EQ(read_table(dir.path() / "out/metrics.csv").size(), 3u);
}

TEST(TrainFed, WithoutCsvEveryModuleIsReplaced) {
  ScratchDir dir;
  auto rc = parse_run_config(smoke_json(), dir.path());
  rc.federation.csv_enabled = false;
  cmd_train_fed(rc);
  const auto map = read_table(dir.path() / "out/replacement_map.csv");
  for (std::size_t i = 1; i < map.size(); ++i) {
    EXPECT_EQ(map[i][2], "1");
    EXPECT_EQ(map[i][3], "1");
    EXPECT_EQ(map[i][4], "1");
  }
}

TEST(Evaluate, ReplaysTrainingMetricsAndBaseline) {
  ScratchDir dir;
  const auto rc = parse_run_config(smoke_json(), dir.path());
  const auto trained = cmd_train_fed(rc);
  const auto eval = cmd_evaluate(rc, EvaluateOptions{dir.path() / "out/checkpoints/beta.ckpt", "", true});
  EXPECT_EQ(eval["client"], "beta");
  EXPECT_EQ(eval["test"]["mae"], trained["clients"][1]["test"]["mae"]);
  EXPECT_EQ(eval["test"]["rmse"], trained["clients"][1]["test"]["rmse"]);
  EXPECT_GT(eval["baseline"]["mae"].get<double>(), 0.0);
  EXPECT_EQ(read_table(dir.path() / "out/evaluate_beta.csv").size(), 3u);

  EXPECT_THROW(cmd_evaluate(rc, EvaluateOptions{dir.path() / "out/checkpoints/beta.ckpt", "gamma", false}), ConfigError);
  EXPECT_THROW(cmd_evaluate(rc, EvaluateOptions{dir.path() / "missing.ckpt", "beta", false}), ConfigError);

  auto bytes = slurp(dir.path() / "out/checkpoints/beta.ckpt");
  bytes.resize(bytes.size() - 5);
  write_file(dir.path() / "broken.ckpt", bytes);
  EXPECT_THROW(cmd_evaluate(rc, EvaluateOptions{dir.path() / "broken.ckpt", "beta", false}), ManifestError);

  // a checkpoint from a differently shaped model
  auto other = smoke_json();
  other["model"]["hidden_dim"] = 5;
  other["output_dir"] = "other";
  cmd_train_local(parse_run_config(other, dir.path()));
  EXPECT_THROW(cmd_evaluate(rc, EvaluateOptions{dir.path() / "other/checkpoints/beta.ckpt", "", false}), ManifestError);
}

TEST(Checkpoint, RoundTrip) {
  ModelConfig m;
  Checkpoint<float> ck{init_params<float>(m, 1), 0.125, 7, 3};
  const auto back = decode_checkpoint<float>(encode_checkpoint(ck), make_manifest(m));
  EXPECT_EQ(back.val_loss, 0.125);
  EXPECT_EQ(back.epoch, 7u);
  EXPECT_EQ(back.round, 3u);
  EXPECT_TRUE(back.params.identical_to(ck.params));
}

TEST(Data, ShortSegmentsAreConfigErrors) {
  auto j = smoke_json();
  j["clients"][0]["segment_boundaries"] = {8};
  const auto rc = parse_run_config(j, ".");
  try {
    prepare_client(rc, rc.clients[0]);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("alpha"), std::string::npos) << e.what();
  }
}

TEST(Numbers, ShortestRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456.789, -2.5}) EXPECT_EQ(std::stod(fmt_num(v)), v);
  EXPECT_EQ(fmt_num(0.5), "0.5");
}

TEST(Binary, ExitCodes) {
  ScratchDir dir;
  const auto cfg = dir.path() / "run.json";
  write_file(cfg, smoke_json().dump());
  const std::string c = "--config " + cfg.string();
  EXPECT_EQ(run_binary("generate " + c), 0);
  EXPECT_TRUE(fs::exists(dir.path() / "out/data/alpha.csv"));
  EXPECT_EQ(run_binary("generate " + c + " --out " + (dir.path() / "elsewhere").string()), 0);
  EXPECT_TRUE(fs::exists(dir.path() / "elsewhere/data/alpha.csv"));
  EXPECT_EQ(run_binary(""), 1);
  EXPECT_EQ(run_binary("generate"), 1);
  EXPECT_EQ(run_binary("generate --config " + (dir.path() / "nope.json").string()), 1);
  EXPECT_EQ(run_binary("train-fed " + c + " --transport pigeon"), 1);

  auto bad = smoke_json();
  bad["federation"]["local_epochs"] = "four";
  write_file(dir.path() / "bad.json", bad.dump());
  EXPECT_EQ(run_binary("train-fed --config " + (dir.path() / "bad.json").string()), 1);

  EXPECT_EQ(run_binary("train-local " + c), 0);
  write_file(dir.path() / "junk.ckpt", "not a checkpoint");
  EXPECT_EQ(run_binary("evaluate " + c + " --checkpoint " + (dir.path() / "junk.ckpt").string() + " --client alpha"), 2);
  EXPECT_EQ(run_binary("evaluate " + c + " --checkpoint " + (dir.path() / "out/checkpoints/alpha.ckpt").string() +
                       " --baseline"),
            0);
}
