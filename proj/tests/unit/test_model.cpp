#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedstgcrn/grad_check.hpp"
#include "fedstgcrn/model.hpp"
#include "fedstgcrn/training.hpp"

using namespace fedstgcrn;
using T64 = Tensor<double>;

namespace {

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_nodes = 4;
  c.input_dim = 3;
  c.hidden_dim = 5;
  c.embed_dim = 5;
  c.num_heads = 1;
  c.lookback = 3;
  c.horizon = 1;
  return c;
}

T64 random_window(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return T64(std::move(shape), std::move(v));
}

void fill(ParamBundle<double>& p, const std::string& name, std::vector<double> v) {
  auto dst = p.at(name).mutable_values();
  ASSERT_EQ(dst.size(), v.size()) << name;
  std::copy(v.begin(), v.end(), dst.begin());
}

void zero_all(ParamBundle<double>& p) {
  for (auto& e : p.entries())
    for (auto& v : e.tensor.mutable_values()) v = 0.0;
}

}  // namespace

TEST(Model, ManifestOrderAndModules) {
  ModelConfig c = tiny_config();
  c.num_heads = 2;
  const auto m = make_manifest(c);
  ASSERT_FALSE(m.tensors.empty());
  EXPECT_EQ(m.tensors.front().name, "lstm.W_f");
  EXPECT_EQ(m.tensors.back().name, "agcrn.b_out");
  for (const auto& t : m.tensors) {
    const auto prefix = t.name.substr(0, t.name.find('.'));
    EXPECT_EQ(prefix, module_name(t.module)) << t.name;
  }
  auto find = [&](const std::string& n) {
    for (const auto& t : m.tensors)
      if (t.name == n) return t;
    ADD_FAILURE() << "missing " << n;
    return TensorSpec{};
  };
  EXPECT_EQ(find("lstm.W_h").module, ModuleId::Lstm);
  EXPECT_EQ(find("lstm.W_h").shape, (Shape{5, 5}));
  EXPECT_EQ(find("attention.W_Q.1").shape, (Shape{5, 5}));
  EXPECT_EQ(find("attention.W_O").shape, (Shape{10, 5}));
  EXPECT_EQ(find("agcrn.W_r").shape, (Shape{5, 8, 5}));
  EXPECT_EQ(find("agcrn.W_out").module, ModuleId::Agcrn);
  EXPECT_EQ(find("agcrn.W_out").shape, (Shape{5, 1}));
}

TEST(Model, ManifestDoesNotDependOnNodeCount) {
  ModelConfig a = tiny_config(), b = tiny_config();
  b.num_nodes = 97;
  EXPECT_EQ(make_manifest(a), make_manifest(b));
  EXPECT_EQ(param_count(a).count, param_count(b).count);
}

TEST(Model, ParamCountWorkedExample) {
  ModelConfig c;
  c.input_dim = 3;
  c.hidden_dim = 2;
  c.embed_dim = 2;
  c.num_heads = 1;
  c.horizon = 1;
  // lstm 48 + 6, attention 16, agcrn 72 + head 3
  EXPECT_EQ(param_count(c).count, 145u);
  EXPECT_EQ(init_params<float>(c, 1).numel(), 145u);
  ModelConfig q2 = c;
  q2.horizon = 2;
  EXPECT_EQ(param_count(q2).count - param_count(c).count, c.hidden_dim + 1);
}

TEST(Model, ParamCountMatchesBundleForRandomConfigs) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> d(1, 6);
  for (int i = 0; i < 20; ++i) {
    ModelConfig c;
    c.input_dim = d(rng);
    c.hidden_dim = d(rng);
    c.embed_dim = d(rng);
    c.num_heads = d(rng);
    c.horizon = d(rng);
    EXPECT_EQ(param_count(c).count, init_params<float>(c, 3).numel());
  }
}

TEST(Model, InitIsDeterministicBoundedWithZeroBiases) {
  ModelConfig c = tiny_config();
  c.hidden_dim = 12;
  c.embed_dim = 10;
  const auto a = init_params<float>(c, 9);
  const auto b = init_params<float>(c, 9);
  const auto other = init_params<float>(c, 10);
  EXPECT_TRUE(a.identical_to(b));
  EXPECT_FALSE(a.identical_to(other));
  std::size_t sampled = 0;
  for (const auto& e : a.entries()) {
    if (is_bias_name(e.name)) {
      for (float v : e.tensor.values()) EXPECT_EQ(v, 0.0f) << e.name;
      continue;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(e.tensor.shape()[e.tensor.rank() - 2]));
    for (float v : e.tensor.values()) {
      EXPECT_LE(std::abs(static_cast<double>(v)), bound) << e.name;
      ++sampled;
    }
  }
  EXPECT_GE(sampled, 1000u);
}

TEST(Model, LstmWithZeroWeightsOutputsReluOfBias) {
  ModelConfig c = tiny_config();
  c.hidden_dim = 2;
  c.embed_dim = 2;
  auto p = init_params<double>(c, 1);
  zero_all(p);
  fill(p, "lstm.b_h", {0.5, -0.3});
  const auto out = lstm_encode(random_window({3, 4, 3}, 2), p);
  EXPECT_EQ(out.shape(), (Shape{3, 4, 2}));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.values()[i], i % 2 == 0 ? 0.5 : 0.0);
}

TEST(Model, LstmSingleStepHandEvaluation) {
  ModelConfig c;
  c.num_nodes = 1;
  c.input_dim = 1;
  c.hidden_dim = 1;
  c.embed_dim = 1;
  c.lookback = 1;
  auto p = init_params<double>(c, 1);
  // rows: [x, h]; h starts at zero so the second row never contributes
  fill(p, "lstm.W_f", {0.4, 9.0});
  fill(p, "lstm.W_i", {0.5, 9.0});
  fill(p, "lstm.W_c", {1.2, 9.0});
  fill(p, "lstm.W_o", {-0.7, 9.0});
  fill(p, "lstm.b_f", {0.2});
  fill(p, "lstm.b_i", {0.1});
  fill(p, "lstm.b_c", {-0.2});
  fill(p, "lstm.b_o", {0.3});
  fill(p, "lstm.W_h", {2.0});
  fill(p, "lstm.b_h", {0.1});
  const double x = 0.8;
  const double i = sigm(0.5 * x + 0.1), cand = std::tanh(1.2 * x - 0.2), o = sigm(-0.7 * x + 0.3);
  const double cell = i * cand;  // forget gate multiplies the zero initial cell
  const double h = o * std::tanh(cell);
  const double expected = std::max(0.0, 2.0 * h + 0.1);
  const auto out = lstm_encode(T64({1, 1, 1}, {x}), p);
  EXPECT_NEAR(out.item(), expected, 1e-14);
}

TEST(Model, AttentionSingleStepIsValueProjection) {
  ModelConfig c = tiny_config();
  c.lookback = 1;
  c.num_heads = 2;
  const auto p = init_params<double>(c, 4);
  const auto x = random_window({1, 4, 5}, 8);
  const auto out = multihead_attention(x, p, 2);
  const auto v0 = ops::matmul(x, p.at("attention.W_V.0"));
  const auto v1 = ops::matmul(x, p.at("attention.W_V.1"));
  const auto expected = ops::matmul(ops::concat<double>({v0, v1}, 2), p.at("attention.W_O"));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.values()[i], expected.values()[i], 1e-14);
}

TEST(Model, AttentionTwoStepHandEvaluation) {
  ModelConfig c;
  c.num_nodes = 1;
  c.input_dim = 1;
  c.hidden_dim = 1;
  c.embed_dim = 1;
  c.num_heads = 1;
  c.lookback = 2;
  auto p = init_params<double>(c, 1);
  const double a = 0.9, b = -1.3, v = 0.6, w = 1.5;
  fill(p, "attention.W_Q.0", {a});
  fill(p, "attention.W_K.0", {b});
  fill(p, "attention.W_V.0", {v});
  fill(p, "attention.W_O", {w});
  const double x[2] = {0.4, -1.1};
  double weights[2][2];
  double expected[2];
  for (int i = 0; i < 2; ++i) {
    const double s0 = a * x[i] * b * x[0], s1 = a * x[i] * b * x[1];  // d_h = 1, no scaling
    const double m = std::max(s0, s1);
    const double z = std::exp(s0 - m) + std::exp(s1 - m);
    weights[i][0] = std::exp(s0 - m) / z;
    weights[i][1] = std::exp(s1 - m) / z;
    expected[i] = w * (weights[i][0] * v * x[0] + weights[i][1] * v * x[1]);
  }
  ForwardTrace<double> trace;
  const auto out = multihead_attention(T64({2, 1, 1}, {x[0], x[1]}), p, 1, &trace);
  ASSERT_EQ(trace.attention_weights.size(), 1u);
  const auto& A = trace.attention_weights[0];
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(A.values()[i * 2 + j], weights[i][j], 1e-14);
    EXPECT_NEAR(out.values()[i], expected[i], 1e-14);
  }
}

TEST(Model, SoftmaxRowsSumToOneInTrace) {
  ModelConfig c = tiny_config();
  c.num_heads = 2;
  c.lookback = 5;
  const auto p = init_params<double>(c, 6);
  ForwardTrace<double> trace;
  (void)model_forward(random_window({2, 5, 4, 3}, 1), p, c, &trace);
  ASSERT_EQ(trace.attention_weights.size(), 2u);
  ASSERT_EQ(trace.adjacency.size(), 5u);
  auto check_rows = [](const T64& t) {
    const std::size_t n = t.shape().back();
    for (std::size_t r = 0; r < t.size() / n; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(t.values()[r * n + j], 0.0);
        s += t.values()[r * n + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  };
  for (const auto& a : trace.attention_weights) check_rows(a);
  for (const auto& a : trace.adjacency) check_rows(a);
}

TEST(Model, AdjacencyHandExample) {
  const auto a = dynamic_adjacency(T64({1, 2, 1}, {1.0, 2.0}));
  EXPECT_NEAR(a.values()[0], 0.26894, 1e-5);
  EXPECT_NEAR(a.values()[1], 0.73106, 1e-5);
}

TEST(Model, ResetGateOfOnesCarriesStateThrough) {
  std::mt19937_64 rng(1);
  const auto h_prev = random_window({1, 3, 4}, 3);
  const auto cand = random_window({1, 3, 4}, 4);
  const auto h = gated_update(T64::full({1, 3, 4}, 1.0), h_prev, cand);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(h.values()[i], h_prev.values()[i]);
}

TEST(Model, ConstantEmbeddingsGiveConstantAdjacency) {
  ModelConfig c = tiny_config();
  c.lookback = 4;
  auto p = init_params<double>(c, 2);
  // zero queries make attention uniform over time, so every step sees the
  // same embedding matrix
  for (auto& v : p.at("attention.W_Q.0").mutable_values()) v = 0.0;
  ForwardTrace<double> trace;
  (void)model_forward(random_window({4, 4, 3}, 7), p, c, &trace);
  ASSERT_EQ(trace.adjacency.size(), 4u);
  for (std::size_t t = 1; t < 4; ++t) {
    for (std::size_t i = 0; i < trace.adjacency[0].size(); ++i) {
      EXPECT_NEAR(trace.adjacency[t].values()[i], trace.adjacency[0].values()[i], 1e-12);
    }
  }
}

TEST(Model, ForwardShapesAndDeterminism) {
  ModelConfig c = tiny_config();
  c.horizon = 3;
  const auto p = init_params<double>(c, 2);
  const auto single = model_forward(random_window({3, 4, 3}, 5), p, c);
  EXPECT_EQ(single.shape(), (Shape{3, 4}));
  const auto batched = model_forward(random_window({2, 3, 4, 3}, 5), p, c);
  EXPECT_EQ(batched.shape(), (Shape{2, 3, 4}));
  const auto again = model_forward(random_window({2, 3, 4, 3}, 5), p, c);
  EXPECT_EQ(batched.data(), again.data());
}

TEST(Model, BatchingDoesNotMixSamples) {
  ModelConfig c = tiny_config();
  const auto p = init_params<double>(c, 2);
  const auto a = random_window({3, 4, 3}, 1), b = random_window({3, 4, 3}, 2);
  const auto both = model_forward(ops::stack<double>({a, b}, 0), p, c);
  const auto ya = model_forward(a, p, c), yb = model_forward(b, p, c);
  for (std::size_t i = 0; i < ya.size(); ++i) {
    EXPECT_NEAR(both.values()[i], ya.values()[i], 1e-12);
    EXPECT_NEAR(both.values()[ya.size() + i], yb.values()[i], 1e-12);
  }
}

TEST(Model, NodeCountIsFreeAtForwardTime) {
  ModelConfig c = tiny_config();
  const auto p = init_params<double>(c, 2);
  EXPECT_EQ(model_forward(random_window({3, 7, 3}, 1), p, c).shape(), (Shape{1, 7}));
  EXPECT_THROW(model_forward(random_window({3, 7, 4}, 1), p, c), ShapeError);
}

TEST(Model, FullGradientMatchesFiniteDifferences) {
  const ModelConfig c = tiny_config();
  auto p = init_params<double>(c, 17);
  // non-zero biases so their gradients are exercised away from zero
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& e : p.entries())
    if (is_bias_name(e.name))
      for (auto& v : e.tensor.mutable_values()) v = u(rng);
  const auto x = random_window({2, 3, 4, 3}, 11);
  const auto y = random_window({2, 1, 4}, 12);
  const auto report =
      grad_check<double>([&] { return loss(model_forward(x, p, c), y, LossKind::MAE); }, p.tensors(), 1e-4);
  EXPECT_TRUE(report.passed()) << "max rel error " << report.max_rel_error;
  EXPECT_EQ(report.checked, p.numel());
}
