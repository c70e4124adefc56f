// Differentiable op vocabulary.
//
// Shapes are explicit. The only implicit expansion is add_bias, which adds a
// vector over the last axis to every leading position. Every other op
// requires exactly conforming shapes and throws ShapeError naming the op and
// the offending shapes otherwise.
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedstgcrn/tensor.hpp"

namespace fedstgcrn::ops {

namespace detail {

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + ": non-finite output at flat index " + std::to_string(i));
    }
  }
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b, const std::string& why = {}) {
  std::string msg = std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
  if (!why.empty()) msg += " (" + why + ")";
  throw ShapeError(msg);
}

template <typename T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_graph<T>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Wraps freshly computed values into the output tensor and, when recording,
// attaches the backward rule produced by make_rule(output).
template <typename T, typename MakeRule>
Tensor<T> emit(const char* op, Shape shape, std::vector<T> values, bool record, MakeRule&& make_rule) {
  check_finite(op, values);
  Tensor<T> out(std::move(shape), std::move(values));
  if (record) {
    out.set_requires_grad(true);
    active_graph<T>()->record(op, out, make_rule(out));
  }
  return out;
}

// Tensor is a handle, so a copy accumulates into the shared gradient slot.
template <typename T>
void accumulate(const Tensor<T>& t, const std::vector<T>& g) {
  if (!t.requires_grad()) return;
  Tensor<T> handle = t;
  handle.accumulate_grad(g);
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// (outer, extent, inner) factorization of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, DF dfdy_dx) {
  std::vector<T> y(a.size());
  auto x = a.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(x[i]);
  return emit<T>(op, a.shape(), std::move(y), wants_grad<T>({&a}), [a, dfdy_dx](const Tensor<T>& out) mutable {
    return BackwardRule<T>([a, out, dfdy_dx](std::span<const T> g) mutable {
      auto x = a.values();
      auto y = out.values();
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * dfdy_dx(x[i], y[i]);
      accumulate(a, ga);
    });
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_fail("add", a.shape(), b.shape());
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] + b.values()[i];
  return detail::emit<T>("add", a.shape(), std::move(y), detail::wants_grad<T>({&a, &b}), [a, b](const Tensor<T>&) {
    return BackwardRule<T>([a, b](std::span<const T> g) mutable {
      std::vector<T> gv(g.begin(), g.end());
      detail::accumulate(a, gv);
      detail::accumulate(b, gv);
    });
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_fail("sub", a.shape(), b.shape());
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] - b.values()[i];
  return detail::emit<T>("sub", a.shape(), std::move(y), detail::wants_grad<T>({&a, &b}), [a, b](const Tensor<T>&) {
    return BackwardRule<T>([a, b](std::span<const T> g) mutable {
      std::vector<T> gv(g.begin(), g.end());
      detail::accumulate(a, gv);
      for (auto& v : gv) v = -v;
      detail::accumulate(b, gv);
    });
  });
}

// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_fail("mul", a.shape(), b.shape());
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] * b.values()[i];
  return detail::emit<T>("mul", a.shape(), std::move(y), detail::wants_grad<T>({&a, &b}), [a, b](const Tensor<T>&) {
    return BackwardRule<T>([a, b](std::span<const T> g) mutable {
      if (a.requires_grad()) {
        std::vector<T> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b.values()[i];
        detail::accumulate(a, ga);
      }
      if (b.requires_grad()) {
        std::vector<T> gb(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a.values()[i];
        detail::accumulate(b, gb);
      }
    });
  });
}

// a[..., n] + bias[n], the bias repeated over every leading position.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  if (bias.rank() != 1 || a.rank() == 0 || a.shape().back() != bias.dim(0)) {
    detail::shape_fail("add_bias", a.shape(), bias.shape(), "bias must be a vector matching the last axis");
  }
  const std::size_t n = bias.dim(0);
  std::vector<T> y(a.size());
  auto av = a.values();
  auto bv = bias.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i % n];
  return detail::emit<T>("add_bias", a.shape(), std::move(y), detail::wants_grad<T>({&a, &bias}),
                         [a, bias, n](const Tensor<T>&) {
                           return BackwardRule<T>([a, bias, n](std::span<const T> g) mutable {
                             detail::accumulate(a, std::vector<T>(g.begin(), g.end()));
                             if (bias.requires_grad()) {
                               std::vector<T> gb(n, T(0));
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                               detail::accumulate(bias, gb);
                             }
                           });
                         });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] * s;
  return detail::emit<T>("scale", a.shape(), std::move(y), detail::wants_grad<T>({&a}), [a, s](const Tensor<T>&) {
    return BackwardRule<T>([a, s](std::span<const T> g) mutable {
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
      detail::accumulate(a, ga);
    });
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] + s;
  return detail::emit<T>("add_scalar", a.shape(), std::move(y), detail::wants_grad<T>({&a}), [a](const Tensor<T>&) {
    return BackwardRule<T>([a](std::span<const T> g) mutable { detail::accumulate(a, std::vector<T>(g.begin(), g.end())); });
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary<T>(
      "sigmoid", a,
      [](T x) {
        // split by sign so exp never overflows
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary<T>("tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// Subgradient 0 at the origin.
template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  return detail::emit<T>("sum", Shape{}, std::vector<T>{acc}, detail::wants_grad<T>({&a}), [a](const Tensor<T>&) {
    return BackwardRule<T>([a](std::span<const T> g) mutable { detail::accumulate(a, std::vector<T>(a.size(), g[0])); });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  const T inv = T(1) / static_cast<T>(a.size());
  return detail::emit<T>("mean", Shape{}, std::vector<T>{acc * inv}, detail::wants_grad<T>({&a}),
                         [a, inv](const Tensor<T>&) {
                           return BackwardRule<T>([a, inv](std::span<const T> g) mutable {
                             detail::accumulate(a, std::vector<T>(a.size(), g[0] * inv));
                           });
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// a[..., k] @ w[k, n] -> [..., n]; the weight is shared across leading axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& w) {
  if (w.rank() != 2 || a.rank() == 0 || a.shape().back() != w.dim(0)) {
    detail::shape_fail("matmul", a.shape(), w.shape(), "expected a[..., k] and w[k, n]");
  }
  const std::size_t k = w.dim(0), n = w.dim(1), m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> y(m * n, T(0));
  detail::gemm_nn(a.values().data(), w.values().data(), y.data(), m, k, n);
  return detail::emit<T>("matmul", std::move(out_shape), std::move(y), detail::wants_grad<T>({&a, &w}),
                         [a, w, m, k, n](const Tensor<T>&) {
                           return BackwardRule<T>([a, w, m, k, n](std::span<const T> g) mutable {
                             if (a.requires_grad()) {
                               std::vector<T> ga(m * k, T(0));
                               detail::gemm_nt(g.data(), w.values().data(), ga.data(), m, n, k);
                               detail::accumulate(a, ga);
                             }
                             if (w.requires_grad()) {
                               std::vector<T> gw(k * n, T(0));
                               detail::gemm_tn(a.values().data(), g.data(), gw.data(), m, k, n);
                               detail::accumulate(w, gw);
                             }
                           });
                         });
}

// Batched product a[L..., m, k] @ b[L..., k, n] with identical leading axes.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()) ||
      a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    detail::shape_fail("bmm", a.shape(), b.shape(), "expected [L..., m, k] and [L..., k, n]");
  }
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape()[a.rank() - 1], n = b.shape()[b.rank() - 1];
  const std::size_t batch = a.size() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> y(batch * m * n, T(0));
  for (std::size_t l = 0; l < batch; ++l) {
    detail::gemm_nn(a.values().data() + l * m * k, b.values().data() + l * k * n, y.data() + l * m * n, m, k, n);
  }
  return detail::emit<T>(
      "bmm", std::move(out_shape), std::move(y), detail::wants_grad<T>({&a, &b}),
      [a, b, batch, m, k, n](const Tensor<T>&) {
        return BackwardRule<T>([a, b, batch, m, k, n](std::span<const T> g) mutable {
          if (a.requires_grad()) {
            std::vector<T> ga(a.size(), T(0));
            for (std::size_t l = 0; l < batch; ++l)
              detail::gemm_nt(g.data() + l * m * n, b.values().data() + l * k * n, ga.data() + l * m * k, m, n, k);
            detail::accumulate(a, ga);
          }
          if (b.requires_grad()) {
            std::vector<T> gb(b.size(), T(0));
            for (std::size_t l = 0; l < batch; ++l)
              detail::gemm_tn(a.values().data() + l * m * k, g.data() + l * m * n, gb.data() + l * k * n, m, k, n);
            detail::accumulate(b, gb);
          }
        });
      });
}

// Per-row generated weights: row r of x[L..., C] is multiplied by
// W(r) = sum_k e[r, k] * pool[k] (a C x H matrix), giving out[L..., H].
// This is the node-adaptive contraction einsum("rk,rc,kch->rh").
template <typename T>
Tensor<T> node_adaptive(const Tensor<T>& x, const Tensor<T>& e, const Tensor<T>& pool) {
  if (x.rank() < 1 || e.rank() != x.rank() || pool.rank() != 3 ||
      !std::equal(x.shape().begin(), x.shape().end() - 1, e.shape().begin()) ||
      e.shape().back() != pool.dim(0) || x.shape().back() != pool.dim(1)) {
    detail::shape_fail("node_adaptive", x.shape(), pool.shape(),
                       "expected x[L..., C], e[L..., K], pool[K, C, H]; e is " + shape_str(e.shape()));
  }
  const std::size_t kdim = pool.dim(0), c = pool.dim(1), h = pool.dim(2);
  const std::size_t rows = x.size() / c;
  const std::size_t kc = kdim * c;
  Shape out_shape = x.shape();
  out_shape.back() = h;
  std::vector<T> y(rows * h, T(0));
  std::vector<T> outer(kc);
  const T* xv = x.values().data();
  const T* ev = e.values().data();
  const T* pv = pool.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < kdim; ++k)
      for (std::size_t j = 0; j < c; ++j) outer[k * c + j] = ev[r * kdim + k] * xv[r * c + j];
    detail::gemm_nn(outer.data(), pv, y.data() + r * h, 1, kc, h);
  }
  return detail::emit<T>(
      "node_adaptive", std::move(out_shape), std::move(y), detail::wants_grad<T>({&x, &e, &pool}),
      [x, e, pool, rows, kdim, c, h](const Tensor<T>&) {
        return BackwardRule<T>([x, e, pool, rows, kdim, c, h](std::span<const T> g) mutable {
          const std::size_t kc = kdim * c;
          const T* xv = x.values().data();
          const T* ev = e.values().data();
          const T* pv = pool.values().data();
          std::vector<T> gx(x.requires_grad() ? x.size() : 0, T(0));
          std::vector<T> ge(e.requires_grad() ? e.size() : 0, T(0));
          std::vector<T> gp(pool.requires_grad() ? pool.size() : 0, T(0));
          std::vector<T> outer(kc), gouter(kc);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.data() + r * h;
            if (!gp.empty()) {
              for (std::size_t k = 0; k < kdim; ++k)
                for (std::size_t j = 0; j < c; ++j) outer[k * c + j] = ev[r * kdim + k] * xv[r * c + j];
              detail::gemm_tn(outer.data(), gr, gp.data(), 1, kc, h);
            }
            if (gx.empty() && ge.empty()) continue;
            std::fill(gouter.begin(), gouter.end(), T(0));
            detail::gemm_nt(gr, pv, gouter.data(), 1, h, kc);
            for (std::size_t k = 0; k < kdim; ++k) {
              for (std::size_t j = 0; j < c; ++j) {
                const T go = gouter[k * c + j];
                if (!ge.empty()) ge[r * kdim + k] += go * xv[r * c + j];
                if (!gx.empty()) gx[r * c + j] += go * ev[r * kdim + k];
              }
            }
          }
          if (!gx.empty()) detail::accumulate(x, gx);
          if (!ge.empty()) detail::accumulate(e, ge);
          if (!gp.empty()) detail::accumulate(pool, gp);
        });
      });
}

// ---------------------------------------------------------------------------
// Layout (every one of these copies)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) detail::shape_fail("permute", a.shape(), Shape(perm.begin(), perm.end()), "bad permutation");
  for (auto p : perm) {
    if (p >= r || seen[p]) detail::shape_fail("permute", a.shape(), Shape(perm.begin(), perm.end()), "bad permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);
  const auto in_strides = detail::row_major_strides(a.shape());
  // source offset for each output position
  std::vector<std::size_t> src(a.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> y(a.size());
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = a.values()[src[o]];
  return detail::emit<T>("permute", std::move(out_shape), std::move(y), detail::wants_grad<T>({&a}),
                         [a, src = std::move(src)](const Tensor<T>&) {
                           return BackwardRule<T>([a, src](std::span<const T> g) mutable {
                             std::vector<T> ga(a.size());
                             for (std::size_t o = 0; o < g.size(); ++o) ga[src[o]] = g[o];
                             detail::accumulate(a, ga);
                           });
                         });
}

// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) detail::shape_fail("transpose", a.shape(), a.shape(), "rank must be at least 2");
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) detail::shape_fail("reshape", a.shape(), shape, "element count differs");
  std::vector<T> y(a.values().begin(), a.values().end());
  return detail::emit<T>("reshape", std::move(shape), std::move(y), detail::wants_grad<T>({&a}), [a](const Tensor<T>&) {
    return BackwardRule<T>([a](std::span<const T> g) mutable { detail::accumulate(a, std::vector<T>(g.begin(), g.end())); });
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) detail::shape_fail("concat", ref, ref, "axis " + std::to_string(axis) + " out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) detail::shape_fail("concat", ref, p.shape(), "rank differs");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) detail::shape_fail("concat", ref, p.shape(), "non-concat axis differs");
    }
    out_shape[axis] += p.dim(axis);
  }
  const auto outer = detail::split_at(ref, axis).outer;
  const std::size_t inner = detail::split_at(ref, axis).inner;
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> y(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.values().data() + o * chunk, chunk, y.data() + o * out_row + offset);
    offset += chunk;
  }
  bool record = false;
  if (active_graph<T>() != nullptr) {
    for (const auto& p : parts) record = record || p.requires_grad();
  }
  return detail::emit<T>("concat", std::move(out_shape), std::move(y), record,
                         [parts, outer, inner, out_row, axis](const Tensor<T>&) {
                           return BackwardRule<T>([parts, outer, inner, out_row, axis](std::span<const T> g) mutable {
                             std::size_t offset = 0;
                             for (auto& p : parts) {
                               const std::size_t chunk = p.dim(axis) * inner;
                               if (p.requires_grad()) {
                                 std::vector<T> gp(p.size());
                                 for (std::size_t o = 0; o < outer; ++o)
                                   std::copy_n(g.data() + o * out_row + offset, chunk, gp.data() + o * chunk);
                                 detail::accumulate(p, gp);
                               }
                               offset += chunk;
                             }
                           });
                         });
}

// Stacks equally shaped tensors along a new axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis > ref.size()) detail::shape_fail("stack", ref, ref, "axis out of range");
  std::vector<Tensor<T>> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != ref) detail::shape_fail("stack", ref, p.shape());
    Shape s = p.shape();
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, axis);
}

// Picks index `index` along `axis`, dropping that axis.
template <typename T>
Tensor<T> select(const Tensor<T>& a, std::size_t axis, std::size_t index) {
  if (axis >= a.rank() || index >= a.dim(axis)) {
    detail::shape_fail("select", a.shape(), a.shape(),
                       "axis " + std::to_string(axis) + " index " + std::to_string(index) + " out of range");
  }
  const auto s = detail::split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> y(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(a.values().data() + (o * s.extent + index) * s.inner, s.inner, y.data() + o * s.inner);
  return detail::emit<T>("select", std::move(out_shape), std::move(y), detail::wants_grad<T>({&a}),
                         [a, s, index](const Tensor<T>&) {
                           return BackwardRule<T>([a, s, index](std::span<const T> g) mutable {
                             std::vector<T> ga(a.size(), T(0));
                             for (std::size_t o = 0; o < s.outer; ++o)
                               std::copy_n(g.data() + o * s.inner, s.inner, ga.data() + (o * s.extent + index) * s.inner);
                             detail::accumulate(a, ga);
                           });
                         });
}

// Rows [begin, end) of the leading axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin >= end || end > a.dim(0)) {
    detail::shape_fail("slice", a.shape(), a.shape(),
                       "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid");
  }
  const std::size_t row = a.size() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape[0] = end - begin;
  std::vector<T> y(a.values().begin() + static_cast<std::ptrdiff_t>(begin * row),
                   a.values().begin() + static_cast<std::ptrdiff_t>(end * row));
  return detail::emit<T>("slice", std::move(out_shape), std::move(y), detail::wants_grad<T>({&a}),
                         [a, begin, row](const Tensor<T>&) {
                           return BackwardRule<T>([a, begin, row](std::span<const T> g) mutable {
                             std::vector<T> ga(a.size(), T(0));
                             std::copy(g.begin(), g.end(), ga.begin() + static_cast<std::ptrdiff_t>(begin * row));
                             detail::accumulate(a, ga);
                           });
                         });
}

// Softmax along `axis`, computed with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) detail::shape_fail("softmax", a.shape(), a.shape(), "axis out of range");
  const auto s = detail::split_at(a.shape(), axis);
  std::vector<T> y(a.size());
  auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, x[base + j * s.inner]);
      T total = T(0);
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T ev = std::exp(x[base + j * s.inner] - mx);
        y[base + j * s.inner] = ev;
        total += ev;
      }
      for (std::size_t j = 0; j < s.extent; ++j) y[base + j * s.inner] /= total;
    }
  }
  return detail::emit<T>("softmax", a.shape(), std::move(y), detail::wants_grad<T>({&a}), [a, s](const Tensor<T>& out) {
    return BackwardRule<T>([a, s, out](std::span<const T> g) mutable {
      auto y = out.values();
      std::vector<T> ga(a.size());
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          T dot = T(0);
          for (std::size_t j = 0; j < s.extent; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t at = base + j * s.inner;
            ga[at] = y[at] * (g[at] - dot);
          }
        }
      }
      detail::accumulate(a, ga);
    });
  });
}

// Records an op with a caller-supplied backward rule. Used by tests and by
// anything that needs an op outside this vocabulary.
template <typename T>
Tensor<T> custom(const char* op, const std::vector<Tensor<T>>& inputs, Shape shape, std::vector<T> values,
                 std::function<void(std::span<const T> out_grad, std::vector<Tensor<T>>& inputs)> rule) {
  bool record = false;
  if (active_graph<T>() != nullptr) {
    for (const auto& t : inputs) record = record || t.requires_grad();
  }
  std::vector<Tensor<T>> held = inputs;
  return detail::emit<T>(op, std::move(shape), std::move(values), record, [held, rule](const Tensor<T>&) {
    return BackwardRule<T>([held, rule](std::span<const T> g) {
      std::vector<Tensor<T>> handles = held;
      rule(g, handles);
    });
  });
}

}  // namespace fedstgcrn::ops
