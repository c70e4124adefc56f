// Local supervised training: loss, Adam, mini-batch loop with early stopping
// and best-checkpoint tracking, evaluation metrics and a seasonal-naive
// yardstick.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedstgcrn/data.hpp"
#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/model.hpp"
#include "fedstgcrn/ops.hpp"
#include "fedstgcrn/params.hpp"

namespace fedstgcrn {

enum class LossKind { MAE, MSE };

inline const char* loss_name(LossKind k) { return k == LossKind::MAE ? "MAE" : "MSE"; }

template <typename T>
Tensor<T> loss(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
  if (pred.shape() != target.shape()) ops::detail::shape_fail("loss", pred.shape(), target.shape());
  Tensor<T> diff = ops::sub(pred, target);
  return kind == LossKind::MAE ? ops::mean(ops::abs(diff)) : ops::mean(ops::mul(diff, diff));
}

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 42;
  LossKind loss = LossKind::MAE;
  std::optional<double> clip_norm;  // global gradient norm cap; off by default

  // The patience bound only matters when early stopping is in effect.
  void validate(bool early_stopping = true) const {
    if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("TrainConfig: batch_size must be positive");
    if (patience == 0) throw ConfigError("TrainConfig: patience must be positive");
    if (early_stopping && max_epochs > 0 && patience > max_epochs) throw ConfigError("TrainConfig: patience exceeds max_epochs");
    if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("TrainConfig: clip_norm must be positive");
  }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // mirror the parameter list
};

// One bias-corrected Adam update of `params` from their gradient slots.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& st, double lr) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.size(), 0.0);
      st.v.emplace_back(p.size(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw TrainingError("adam_step: optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw TrainingError("adam_step: parameter #" + std::to_string(i) + " has no gradient");
    if (st.m[i].size() != params[i].size()) throw TrainingError("adam_step: moment shape mismatch");
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_values();
    auto g = params[i].grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * mhat / (std::sqrt(vhat) + st.eps));
    }
  }
}

template <typename T>
void adam_step(ParamBundle<T>& bundle, AdamState<T>& st, double lr) {
  auto tensors = bundle.tensors();
  adam_step<T>(std::span<Tensor<T>>(tensors), st, lr);
}

// Scales all gradients so their joint L2 norm is at most max_norm.
template <typename T>
double clip_grad_norm(ParamBundle<T>& bundle, double max_norm) {
  double sq = 0.0;
  for (const auto& e : bundle.entries())
    for (T g : e.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& e : bundle.entries())
      for (auto& g : e.tensor.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * s);
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Loss over a whole window set
// ---------------------------------------------------------------------------

// Model predictions for every window, flat [S, Q, N], standardized scale.
template <typename T>
std::vector<double> predict(const ModelConfig& cfg, const ParamBundle<T>& params, const WindowSet& windows,
                            std::size_t chunk = 64) {
  NoGradScope<T> no_grad;
  std::vector<double> out;
  out.reserve(windows.count * windows.target_stride());
  for (std::size_t begin = 0; begin < windows.count; begin += chunk) {
    const std::size_t end = std::min(windows.count, begin + chunk);
    auto [x, y] = windows.range<T>(begin, end);
    (void)y;
    Tensor<T> pred = model_forward(x, params, cfg);
    for (T v : pred.values()) out.push_back(static_cast<double>(v));
  }
  return out;
}

// Mean loss over every sample, node and horizon step, accumulated in double.
template <typename T>
double dataset_loss(const ModelConfig& cfg, const ParamBundle<T>& params, const WindowSet& windows, LossKind kind) {
  if (windows.count == 0) throw TrainingError("dataset_loss: empty window set");
  const auto pred = predict(cfg, params, windows);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    // round the target to T so this matches the batched training loss
    const double d = pred[i] - static_cast<double>(static_cast<T>(windows.targets[i]));
    acc += kind == LossKind::MAE ? std::abs(d) : d * d;
  }
  return acc / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Local training loop
// ---------------------------------------------------------------------------

template <typename T>
struct Checkpoint {
  ParamBundle<T> params;
  double val_loss = std::numeric_limits<double>::infinity();
  std::size_t epoch = 0;
  std::size_t round = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

template <typename T>
struct TrainResult {
  ParamBundle<T> params;  // after the last executed epoch
  Checkpoint<T> best;     // lowest validation loss seen, including the starting point
  std::vector<EpochRecord> history;
  double initial_val_loss = 0.0;
  bool stopped_early = false;
};

struct LocalTrainOptions {
  // Added to the epoch number when deriving the shuffle stream, so
  // consecutive federated rounds keep drawing fresh orders.
  std::size_t epoch_offset = 0;
  bool early_stopping = true;
  // Validation loss of the starting parameters if already known.
  std::optional<double> initial_val_loss;
  std::size_t round = 0;
};

// Order of training samples for one epoch, from a stream keyed by
// (seed, epoch) only.
inline std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

template <typename T>
TrainResult<T> train_local(const ModelConfig& cfg, ParamBundle<T> params, const WindowSet& train, const WindowSet& val,
                           const TrainConfig& tcfg, const LocalTrainOptions& opt = {}) {
  tcfg.validate(opt.early_stopping);
  if (train.count == 0 || val.count == 0) throw TrainingError("train_local: empty window set");
  params.set_requires_grad(true);

  TrainResult<T> result;
  result.initial_val_loss = opt.initial_val_loss ? *opt.initial_val_loss : dataset_loss(cfg, params, val, tcfg.loss);
  result.best = Checkpoint<T>{params, result.initial_val_loss, 0, opt.round};

  AdamState<T> adam;
  std::size_t since_improvement = 0;
  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const auto order = epoch_order(train.count, tcfg.seed, opt.epoch_offset + epoch);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += tcfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + tcfg.batch_size);
      auto [x, y] = train.batch<T>(std::span<const std::size_t>(order).subspan(begin, end - begin));
      params.zero_grad();
      Graph<T> graph;
      GradScope<T> scope(graph);
      Tensor<T> batch_loss = loss(model_forward(x, params, cfg), y, tcfg.loss);
      graph.backward(batch_loss);
      if (tcfg.clip_norm) clip_grad_norm(params, *tcfg.clip_norm);
      adam_step(params, adam, tcfg.learning_rate);
      loss_sum += static_cast<double>(batch_loss.item()) * static_cast<double>(end - begin);
    }
    params.zero_grad();
    const double val_loss = dataset_loss(cfg, params, val, tcfg.loss);
    result.history.push_back({epoch, loss_sum / static_cast<double>(order.size()), val_loss});
    if (val_loss < result.best.val_loss) {
      result.best = Checkpoint<T>{params, val_loss, epoch, opt.round};
      since_improvement = 0;
    } else if (++since_improvement >= tcfg.patience && opt.early_stopping) {
      result.stopped_early = true;
      break;
    }
  }
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t count = 0;
};

inline Metrics compute_metrics(std::span<const double> actual, std::span<const double> predicted) {
  if (actual.size() != predicted.size() || actual.empty()) throw DataError("compute_metrics: size mismatch or empty input");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double d = actual[i] - predicted[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const double n = static_cast<double>(actual.size());
  return Metrics{abs_sum / n, std::sqrt(sq_sum / n), actual.size()};
}

// MAE and RMSE in original units: predictions and targets are
// de-standardized with the training scaler first.
template <typename T>
Metrics evaluate(const ModelConfig& cfg, const ParamBundle<T>& params, const WindowSet& test, const Scaler& scaler) {
  const auto pred = inverse_transform_target(predict(cfg, params, test), scaler);
  const auto actual = inverse_transform_target(test.targets, scaler);
  return compute_metrics(actual, pred);
}

// Repeats the value `season` steps before each target (wrapping within the
// last season for multi-step horizons). Needs season <= lookback.
inline Metrics seasonal_naive_baseline(const WindowSet& test, const Scaler& scaler, std::size_t season) {
  if (season == 0 || season > test.lookback) {
    throw DataError("seasonal_naive_baseline: season " + std::to_string(season) + " must lie in [1, lookback=" +
                    std::to_string(test.lookback) + "]");
  }
  std::vector<double> pred;
  pred.reserve(test.targets.size());
  const std::size_t N = test.num_nodes, D = test.num_channels, p = test.lookback;
  for (std::size_t s = 0; s < test.count; ++s) {
    for (std::size_t q = 0; q < test.horizon; ++q) {
      const std::size_t step = p - season + (q % season);
      for (std::size_t n = 0; n < N; ++n) pred.push_back(test.inputs[s * test.input_stride() + (step * N + n) * D]);
    }
  }
  return compute_metrics(inverse_transform_target(test.targets, scaler), inverse_transform_target(pred, scaler));
}

}  // namespace fedstgcrn
