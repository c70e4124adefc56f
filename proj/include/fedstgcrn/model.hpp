// LSTM encoder -> multihead temporal attention -> dynamic-embedding AGCRN ->
// linear head.
//
// Tensor layout: a batch of windows is [B, p, N, D] (sample, step, node,
// channel) and predictions are [B, Q, N]. Unbatched [p, N, D] windows are
// accepted everywhere and give [Q, N] back.
//
// No parameter depends on N, so bundles from clients with different node
// counts share one manifest.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/ops.hpp"
#include "fedstgcrn/params.hpp"
#include "fedstgcrn/tensor.hpp"

namespace fedstgcrn {

struct ModelConfig {
  std::size_t num_nodes = 1;   // client-local; never part of a parameter shape
  std::size_t input_dim = 1;   // D, channel 0 is the target
  std::size_t hidden_dim = 8;  // d_h
  std::size_t embed_dim = 8;   // d_e
  std::size_t num_heads = 1;   // G
  std::size_t lookback = 12;   // p
  std::size_t horizon = 1;     // Q

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw ConfigError(std::string("ModelConfig: ") + what + " must be positive");
    };
    positive(num_nodes, "num_nodes");
    positive(input_dim, "input_dim");
    positive(hidden_dim, "hidden_dim");
    positive(embed_dim, "embed_dim");
    positive(num_heads, "num_heads");
    positive(lookback, "lookback");
    positive(horizon, "horizon");
  }
};

namespace param_names {
inline std::string head(const char* which, std::size_t k) { return std::string("attention.") + which + "." + std::to_string(k); }
}  // namespace param_names

// Tensor order, names and shapes of a bundle for `cfg`.
inline Manifest make_manifest(const ModelConfig& cfg, DType dtype = DType::F32) {
  const std::size_t D = cfg.input_dim, H = cfg.hidden_dim, E = cfg.embed_dim, G = cfg.num_heads, Q = cfg.horizon;
  const std::size_t C = D + H;
  Manifest m;
  m.dtype = dtype;
  auto add = [&](std::string name, ModuleId mod, Shape shape) { m.tensors.push_back({std::move(name), mod, std::move(shape)}); };
  for (const char* w : {"lstm.W_f", "lstm.W_i", "lstm.W_c", "lstm.W_o"}) add(w, ModuleId::Lstm, {C, H});
  for (const char* b : {"lstm.b_f", "lstm.b_i", "lstm.b_c", "lstm.b_o"}) add(b, ModuleId::Lstm, {H});
  add("lstm.W_h", ModuleId::Lstm, {H, E});
  add("lstm.b_h", ModuleId::Lstm, {E});
  for (std::size_t k = 0; k < G; ++k) {
    add(param_names::head("W_Q", k), ModuleId::Attention, {E, H});
    add(param_names::head("W_K", k), ModuleId::Attention, {E, H});
    add(param_names::head("W_V", k), ModuleId::Attention, {E, H});
  }
  add("attention.W_O", ModuleId::Attention, {G * H, E});
  for (const char* w : {"agcrn.W_r", "agcrn.W_u", "agcrn.W_hat"}) add(w, ModuleId::Agcrn, {E, C, H});
  for (const char* b : {"agcrn.b_r", "agcrn.b_u", "agcrn.b_hat"}) add(b, ModuleId::Agcrn, {E, H});
  add("agcrn.W_out", ModuleId::Agcrn, {H, Q});
  add("agcrn.b_out", ModuleId::Agcrn, {Q});
  return m;
}

inline bool is_bias_name(const std::string& name) {
  const auto dot = name.find('.');
  return name.compare(dot + 1, 2, "b_") == 0;
}

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) where fan_in is the
// second-to-last extent (matrix rows, or C for the node-adaptive pools).
// Biases start at zero.
template <typename T>
ParamBundle<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamBundle<T> bundle;
  for (auto& spec : make_manifest(cfg, dtype_of<T>()).tensors) {
    std::vector<T> values(shape_numel(spec.shape), T(0));
    if (!is_bias_name(spec.name)) {
      const double fan_in = static_cast<double>(spec.shape[spec.shape.size() - 2]);
      const double bound = 1.0 / std::sqrt(fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : values) v = static_cast<T>(dist(rng));
    }
    bundle.add(spec.name, spec.module, Tensor<T>(spec.shape, std::move(values), true));
  }
  return bundle;
}

struct ParamCount {
  std::size_t count = 0;
  std::size_t payload_bytes = 0;
};

// Closed-form parameter count. payload_bytes is the exact serialized size:
// manifest header (manifest_encoded_size) plus count * element size.
inline ParamCount param_count(const ModelConfig& cfg, DType dtype = DType::F32) {
  const std::size_t D = cfg.input_dim, H = cfg.hidden_dim, E = cfg.embed_dim, G = cfg.num_heads, Q = cfg.horizon;
  const std::size_t C = D + H;
  const std::size_t lstm = 4 * C * H + 4 * H + H * E + E;
  const std::size_t attention = 3 * G * E * H + G * H * E;
  const std::size_t agcrn = 3 * E * C * H + 3 * E * H + H * Q + Q;
  ParamCount pc;
  pc.count = lstm + attention + agcrn;
  pc.payload_bytes = manifest_encoded_size(make_manifest(cfg, dtype)) + pc.count * dtype_bytes(dtype);
  return pc;
}

// Intermediate values captured for inspection (tests, diagnostics).
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> attention_weights;  // per head, [B*N, p, p]
  std::vector<Tensor<T>> adjacency;          // per step, [B, N, N]
  std::vector<Tensor<T>> reset_gates;        // per step, [B, N, d_h]
  std::vector<Tensor<T>> agcrn_states;       // per step, [B, N, d_h]
};

namespace detail {

struct WindowDims {
  std::size_t batch, steps, nodes, channels;
};

inline WindowDims window_dims(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [B, p, N, D] window, got " + shape_str(s));
  return {s[0], s[1], s[2], s[3]};
}

// Promotes an unbatched [p, N, D] tensor to [1, p, N, D].
template <typename T>
std::pair<Tensor<T>, bool> ensure_batched(const Tensor<T>& x) {
  if (x.rank() == 3) {
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    return {ops::reshape(x, s), true};
  }
  return {x, false};
}

template <typename T>
Tensor<T> drop_batch(const Tensor<T>& x) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  return ops::reshape(x, s);
}

}  // namespace detail

// Six-gate LSTM over the window, states carried per node from zeros, then
// X'' = ReLU(X' W_h + b_h). Returns [B, p, N, d_e].
template <typename T>
Tensor<T> lstm_encode(const Tensor<T>& window_in, const ParamBundle<T>& params) {
  auto [window, unbatched] = detail::ensure_batched(window_in);
  const auto d = detail::window_dims(window.shape(), "lstm_encode");
  const Tensor<T>& W_f = params.at("lstm.W_f");
  const std::size_t H = W_f.dim(1);
  if (W_f.dim(0) != d.channels + H) {
    throw ShapeError("lstm_encode: window has D=" + std::to_string(d.channels) + " but lstm.W_f is " +
                     shape_str(W_f.shape()));
  }
  auto gate = [&](const Tensor<T>& z, const char* w, const char* b) {
    return ops::add_bias(ops::matmul(z, params.at(w)), params.at(b));
  };
  Tensor<T> h = Tensor<T>::zeros({d.batch, d.nodes, H});
  Tensor<T> c = Tensor<T>::zeros({d.batch, d.nodes, H});
  std::vector<Tensor<T>> hs;
  hs.reserve(d.steps);
  for (std::size_t t = 0; t < d.steps; ++t) {
    Tensor<T> z = ops::concat<T>({ops::select(window, 1, t), h}, 2);
    Tensor<T> f = ops::sigmoid(gate(z, "lstm.W_f", "lstm.b_f"));
    Tensor<T> i = ops::sigmoid(gate(z, "lstm.W_i", "lstm.b_i"));
    Tensor<T> cand = ops::tanh(gate(z, "lstm.W_c", "lstm.b_c"));
    c = ops::add(ops::mul(f, c), ops::mul(i, cand));
    Tensor<T> o = ops::sigmoid(gate(z, "lstm.W_o", "lstm.b_o"));
    h = ops::mul(o, ops::tanh(c));
    hs.push_back(h);
  }
  Tensor<T> seq = ops::stack(hs, 1);
  Tensor<T> out = ops::relu(ops::add_bias(ops::matmul(seq, params.at("lstm.W_h")), params.at("lstm.b_h")));
  return unbatched ? detail::drop_batch(out) : out;
}

// Scaled dot-product attention over the temporal axis, per node, for every
// head; heads are concatenated and projected by W_O. [B, p, N, d_e] in and out.
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& x_in, const ParamBundle<T>& params, std::size_t num_heads,
                              ForwardTrace<T>* trace = nullptr) {
  auto [x, unbatched] = detail::ensure_batched(x_in);
  const auto d = detail::window_dims(x.shape(), "multihead_attention");
  Tensor<T> per_node = ops::reshape(ops::permute(x, {0, 2, 1, 3}), {d.batch * d.nodes, d.steps, d.channels});
  std::vector<Tensor<T>> heads;
  heads.reserve(num_heads);
  for (std::size_t k = 0; k < num_heads; ++k) {
    const Tensor<T>& wq = params.at(param_names::head("W_Q", k));
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(wq.dim(1)));
    Tensor<T> q = ops::matmul(per_node, wq);
    Tensor<T> key = ops::matmul(per_node, params.at(param_names::head("W_K", k)));
    Tensor<T> v = ops::matmul(per_node, params.at(param_names::head("W_V", k)));
    Tensor<T> weights = ops::softmax(ops::scale(ops::bmm(q, ops::transpose(key)), inv_sqrt), 2);
    if (trace) trace->attention_weights.push_back(weights);
    heads.push_back(ops::bmm(weights, v));
  }
  Tensor<T> joined = num_heads == 1 ? heads.front() : ops::concat(heads, 2);
  const Tensor<T>& w_o = params.at("attention.W_O");
  if (w_o.dim(0) != joined.shape().back()) {
    throw ShapeError("multihead_attention: " + std::to_string(num_heads) + " heads do not match attention.W_O " +
                     shape_str(w_o.shape()));
  }
  Tensor<T> projected = ops::matmul(joined, w_o);
  const std::size_t e = w_o.dim(1);
  Tensor<T> out = ops::permute(ops::reshape(projected, {d.batch, d.nodes, d.steps, e}), {0, 2, 1, 3});
  return unbatched ? detail::drop_batch(out) : out;
}

// Ã = softmax(ReLU(E Eᵀ)) row-wise, for E of shape [B, N, d_e].
template <typename T>
Tensor<T> dynamic_adjacency(const Tensor<T>& e) {
  Tensor<T> a = ops::softmax(ops::relu(ops::bmm(e, ops::transpose(e))), e.rank() - 1);
  for (T v : a.values()) {
    if (std::isnan(v)) throw NumericError("dynamic_adjacency: NaN in adjacency (embedding blow-up)");
  }
  return a;
}

// H̃_t = R ⊙ H̃_{t-1} + (1 - R) ⊙ Ĥ_t
template <typename T>
Tensor<T> gated_update(const Tensor<T>& r, const Tensor<T>& h_prev, const Tensor<T>& h_cand) {
  Tensor<T> keep = ops::mul(r, h_prev);
  Tensor<T> one_minus_r = ops::add_scalar(ops::scale(r, T(-1)), T(1));
  return ops::add(keep, ops::mul(one_minus_r, h_cand));
}

// One dynamic-embedding AGCRN step. x_t [B, N, D], e_t [B, N, d_e],
// h_prev [B, N, d_h]; returns the new state.
template <typename T>
Tensor<T> agcrn_cell(const Tensor<T>& x_t, const Tensor<T>& e_t, const Tensor<T>& h_prev, const ParamBundle<T>& params,
                     ForwardTrace<T>* trace = nullptr) {
  Tensor<T> adj = dynamic_adjacency(e_t);
  auto graph_conv = [&](const Tensor<T>& z, const char* pool, const char* bias) {
    Tensor<T> mixed = ops::bmm(adj, z);
    return ops::add(ops::node_adaptive(mixed, e_t, params.at(pool)), ops::matmul(e_t, params.at(bias)));
  };
  Tensor<T> z = ops::concat<T>({x_t, h_prev}, 2);
  Tensor<T> r = ops::sigmoid(graph_conv(z, "agcrn.W_r", "agcrn.b_r"));
  Tensor<T> u = ops::sigmoid(graph_conv(z, "agcrn.W_u", "agcrn.b_u"));
  Tensor<T> z_cand = ops::concat<T>({x_t, ops::mul(u, h_prev)}, 2);
  Tensor<T> h_cand = ops::tanh(graph_conv(z_cand, "agcrn.W_hat", "agcrn.b_hat"));
  Tensor<T> h = gated_update(r, h_prev, h_cand);
  if (trace) {
    trace->adjacency.push_back(adj);
    trace->reset_gates.push_back(r);
    trace->agcrn_states.push_back(h);
  }
  return h;
}

// Runs the AGCRN over the window with per-step embeddings and applies the
// prediction head to the last state. window [B, p, N, D], embeds
// [B, p, N, d_e] -> [B, Q, N].
template <typename T>
Tensor<T> agcrn_forward(const Tensor<T>& window_in, const Tensor<T>& embeds_in, const ParamBundle<T>& params,
                        ForwardTrace<T>* trace = nullptr) {
  auto [window, unbatched] = detail::ensure_batched(window_in);
  auto [embeds, unused] = detail::ensure_batched(embeds_in);
  (void)unused;
  const auto d = detail::window_dims(window.shape(), "agcrn_forward");
  const auto de = detail::window_dims(embeds.shape(), "agcrn_forward");
  if (de.batch != d.batch || de.steps != d.steps || de.nodes != d.nodes) {
    throw ShapeError("agcrn_forward: shape mismatch window " + shape_str(window.shape()) + " vs embeddings " +
                     shape_str(embeds.shape()));
  }
  const std::size_t H = params.at("agcrn.W_out").dim(0);
  Tensor<T> h = Tensor<T>::zeros({d.batch, d.nodes, H});
  for (std::size_t t = 0; t < d.steps; ++t) {
    h = agcrn_cell(ops::select(window, 1, t), ops::select(embeds, 1, t), h, params, trace);
  }
  Tensor<T> y = ops::add_bias(ops::matmul(h, params.at("agcrn.W_out")), params.at("agcrn.b_out"));
  Tensor<T> out = ops::permute(y, {0, 2, 1});
  return unbatched ? detail::drop_batch(out) : out;
}

// Full forward pass. Pure: no state survives between calls.
template <typename T>
Tensor<T> model_forward(const Tensor<T>& window, const ParamBundle<T>& params, const ModelConfig& cfg,
                        ForwardTrace<T>* trace = nullptr) {
  Tensor<T> encoded = lstm_encode(window, params);
  Tensor<T> embeds = multihead_attention(encoded, params, cfg.num_heads, trace);
  return agcrn_forward(window, embeds, params, trace);
}

}  // namespace fedstgcrn
