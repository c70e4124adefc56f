#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedstgcrn/data.hpp"
#include "fedstgcrn/model.hpp"
#include "fedstgcrn/training.hpp"

using namespace fedstgcrn;

namespace {

struct Fixture {
  ModelConfig cfg;
  PreparedData data;
};

// N=4, T=400 synthetic client with a small model.
const Fixture& small_client() {
  static const Fixture f = [] {
    SyntheticSpec s;
    s.num_nodes = 4;
    s.num_steps = 400;
    s.seed = 42;
    PrepareOptions po;
    po.lookback = 12;
    Fixture out;
    out.data = prepare_data(generate_synthetic(s), po);
    out.cfg.num_nodes = 4;
    out.cfg.input_dim = out.data.num_channels;
    out.cfg.hidden_dim = 6;
    out.cfg.embed_dim = 6;
    out.cfg.lookback = 12;
    return out;
  }();
  return f;
}

Tensor<double> vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>({n}, std::move(v));
}

}  // namespace

TEST(Loss, HandExamples) {
  EXPECT_DOUBLE_EQ(loss(vec({3, 1}), vec({2, 4}), LossKind::MAE).item(), 2.0);
  EXPECT_DOUBLE_EQ(loss(vec({3, 1}), vec({2, 4}), LossKind::MSE).item(), 5.0);
  EXPECT_DOUBLE_EQ(loss(vec({3, 1}), vec({3, 1}), LossKind::MAE).item(), 0.0);
  EXPECT_THROW(loss(vec({3, 1}), vec({3, 1, 2}), LossKind::MAE), ShapeError);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Tensor<double> w({2}, {1.5, -2.0}, true);
  (void)w.mutable_grad();
  std::vector<Tensor<double>> ps{w};
  AdamState<double> st;
  adam_step<double>(std::span<Tensor<double>>(ps), st, 0.1);
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(w.values()[0], 1.5);
  EXPECT_EQ(w.values()[1], -2.0);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  Tensor<double> w({3}, {0.0, 0.0, 0.0}, true);
  (void)w.mutable_grad();
  const std::vector<double> g{4.0, -0.5, 1e-2};
  std::copy(g.begin(), g.end(), w.mutable_grad().begin());
  std::vector<Tensor<double>> ps{w};
  AdamState<double> st;
  adam_step<double>(std::span<Tensor<double>>(ps), st, 0.01);
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = -0.01 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(w.values()[i], expected, 1e-15);
    EXPECT_NEAR(w.values()[i], g[i] > 0 ? -0.01 : 0.01, 1e-7);
  }
}

TEST(Adam, ConvergesOnQuadratic) {
  // f(w) = (w - 1)^2 from w = 0
  Tensor<double> w({1}, {0.0}, true);
  std::vector<Tensor<double>> ps{w};
  AdamState<double> st;
  for (int i = 0; i < 500; ++i) {
    w.clear_grad();
    Graph<double> g;
    GradScope<double> scope(g);
    Tensor<double> d = ops::sub(w, Tensor<double>({1}, {1.0}));
    Tensor<double> f = ops::sum(ops::mul(d, d));
    g.backward(f);
    adam_step<double>(std::span<Tensor<double>>(ps), st, 0.01);
  }
  EXPECT_NEAR(w.values()[0], 1.0, 1e-3);
}

TEST(Adam, MissingGradientThrows) {
  Tensor<double> w({1}, {0.0}, true);
  std::vector<Tensor<double>> ps{w};
  AdamState<double> st;
  EXPECT_THROW(adam_step<double>(std::span<Tensor<double>>(ps), st, 0.01), TrainingError);
}

TEST(TrainLocal, ZeroEpochsReturnsInput) {
  const auto& f = small_client();
  const auto init = init_params<float>(f.cfg, 1);
  TrainConfig tc;
  tc.max_epochs = 0;
  const auto r = train_local(f.cfg, init, f.data.train, f.data.val, tc);
  EXPECT_TRUE(r.params.identical_to(init));
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best.val_loss, dataset_loss(f.cfg, init, f.data.val, LossKind::MAE));
  EXPECT_EQ(r.best.val_loss, r.initial_val_loss);
}

TEST(TrainLocal, EmptyWindowsThrow) {
  const auto& f = small_client();
  WindowSet empty = f.data.val;
  empty.count = 0;
  EXPECT_THROW(train_local(f.cfg, init_params<float>(f.cfg, 1), f.data.train, empty, TrainConfig{}), TrainingError);
}

TEST(TrainLocal, TinyRunImprovesAndBestIsEnvelope) {
  const auto& f = small_client();
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.max_epochs = 6;
  tc.patience = 6;
  tc.seed = 42;
  const auto r = train_local(f.cfg, init_params<float>(f.cfg, 42), f.data.train, f.data.val, tc);
  EXPECT_LE(r.history.size(), tc.max_epochs);
  EXPECT_LT(r.best.val_loss, r.initial_val_loss);
  double envelope = r.initial_val_loss, minimum = r.initial_val_loss;
  for (const auto& h : r.history) {
    const double next = std::min(envelope, h.val_loss);
    EXPECT_LE(next, envelope);
    envelope = next;
    minimum = std::min(minimum, h.val_loss);
  }
  EXPECT_EQ(r.best.val_loss, minimum);
  EXPECT_DOUBLE_EQ(dataset_loss(f.cfg, r.best.params, f.data.val, LossKind::MAE), r.best.val_loss);

  // rerun is bit-identical
  const auto again = train_local(f.cfg, init_params<float>(f.cfg, 42), f.data.train, f.data.val, tc);
  EXPECT_TRUE(again.params.identical_to(r.params));
  ASSERT_EQ(again.history.size(), r.history.size());
  for (std::size_t i = 0; i < r.history.size(); ++i) EXPECT_EQ(again.history[i].val_loss, r.history[i].val_loss);
}

TEST(TrainLocal, EarlyStopFiresExactlyPatienceAfterLastImprovement) {
  const auto& f = small_client();
  // a step far below float resolution leaves the weights, and so the
  // validation loss, unchanged: no epoch ever improves
  TrainConfig tc;
  tc.learning_rate = 1e-20;
  tc.max_epochs = 10;
  tc.patience = 3;
  const auto r = train_local(f.cfg, init_params<float>(f.cfg, 7), f.data.train, f.data.val, tc);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.best.epoch, 0u);
  EXPECT_EQ(r.history.size(), tc.patience);
}

TEST(TrainLocal, EarlyStopAfterGenuineImprovements) {
  const auto& f = small_client();
  TrainConfig tc;
  tc.learning_rate = 5e-2;
  tc.max_epochs = 12;
  tc.patience = 2;
  const auto r = train_local(f.cfg, init_params<float>(f.cfg, 3), f.data.train, f.data.val, tc);
  ASSERT_GT(r.best.epoch, 0u);
  if (r.stopped_early) {
    EXPECT_EQ(r.history.size(), r.best.epoch + tc.patience);
  } else {
    EXPECT_EQ(r.history.size(), tc.max_epochs);
    EXPECT_LT(tc.max_epochs - r.best.epoch, tc.patience);
  }
}

TEST(TrainLocal, ConfigValidation) {
  TrainConfig tc;
  tc.learning_rate = 0.0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.max_epochs = 3;
  tc.patience = 5;
  EXPECT_THROW(tc.validate(), ConfigError);
  EXPECT_NO_THROW(tc.validate(false));
}

TEST(Metrics, HandExamples) {
  const std::vector<double> a{0, 0}, p{1, -3};
  const auto m = compute_metrics(a, p);
  EXPECT_DOUBLE_EQ(m.mae, 2.0);
  EXPECT_NEAR(m.rmse, 2.23607, 1e-5);
  EXPECT_DOUBLE_EQ(m.rmse, std::sqrt(5.0));
  const auto perfect = compute_metrics(a, a);
  EXPECT_EQ(perfect.mae, 0.0);
  EXPECT_EQ(perfect.rmse, 0.0);
  EXPECT_THROW(compute_metrics(a, std::vector<double>{1.0}), DataError);
}

TEST(Metrics, RmseDominatesMae) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 3.0);
  std::uniform_int_distribution<std::size_t> len(1, 50);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(len(rng)), p(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = n(rng), p[i] = n(rng);
    const auto m = compute_metrics(a, p);
    EXPECT_GE(m.rmse, m.mae * (1.0 - 1e-15));
  }
}

TEST(Evaluate, MatchesManualDestandardization) {
  const auto& f = small_client();
  const auto params = init_params<float>(f.cfg, 5);
  const auto m = evaluate(f.cfg, params, f.data.test, f.data.scaler);
  const auto pred = predict(f.cfg, params, f.data.test);
  double abs_sum = 0.0;
  const std::size_t N = f.data.test.num_nodes;
  for (std::size_t i = 0; i < pred.size(); ++i)
    abs_sum += std::abs((pred[i] - f.data.test.targets[i]) * f.data.scaler.std_at(i % N, 0));
  EXPECT_NEAR(m.mae, abs_sum / static_cast<double>(pred.size()), 1e-9);
  EXPECT_EQ(m.count, f.data.test.count * f.data.test.target_stride());
}

TEST(SeasonalNaive, PeriodicSeriesIsExact) {
  WindowSet w;
  w.lookback = 6;
  w.horizon = 2;
  w.num_nodes = 1;
  w.num_channels = 1;
  // series with period 3
  auto v = [](std::size_t t) { return static_cast<double>(t % 3); };
  for (std::size_t s = 0; s < 5; ++s) {
    for (std::size_t k = 0; k < 6; ++k) w.inputs.push_back(v(s + k));
    for (std::size_t q = 0; q < 2; ++q) w.targets.push_back(v(s + 6 + q));
    ++w.count;
  }
  Scaler sc;
  sc.num_nodes = 1;
  sc.num_channels = 1;
  sc.mean = {10.0};
  sc.std = {2.0};
  EXPECT_EQ(seasonal_naive_baseline(w, sc, 3).mae, 0.0);
  EXPECT_EQ(seasonal_naive_baseline(w, sc, 6).mae, 0.0);
  EXPECT_GT(seasonal_naive_baseline(w, sc, 2).mae, 0.0);
  EXPECT_THROW(seasonal_naive_baseline(w, sc, 7), DataError);
  EXPECT_THROW(seasonal_naive_baseline(w, sc, 0), DataError);
}
