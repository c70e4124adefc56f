#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "fedstgcrn/tensor.hpp"

namespace fedstgcrn {

struct GradCheckFailure {
  std::size_t param = 0;    // index into the params list
  std::size_t element = 0;  // flat index inside that parameter
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failures.empty(); }
};

// Compares reverse-mode gradients of a scalar function against central
// differences, element by element. `f` must read the current values of
// `params` and be deterministic. The error measure is
//   |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, double tol,
                           double step = 1e-5) {
  std::vector<std::vector<T>> analytic;
  {
    for (auto& p : params) {
      p.set_requires_grad(true);
      p.clear_grad();
    }
    Graph<T> graph;
    GradScope<T> scope(graph);
    Tensor<T> root = f();
    graph.backward(root);
    for (auto& p : params) {
      if (p.has_grad()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        analytic.emplace_back(p.size(), T(0));  // unreachable from the root
      }
    }
  }

  GradCheckReport report;
  NoGradScope<T> no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = static_cast<T>(saved + step);
      const double up = static_cast<double>(f().item());
      values[i] = static_cast<T>(saved - step);
      const double down = static_cast<double>(f().item());
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double a = static_cast<double>(analytic[pi][i]);
      const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.checked;
      if (!(rel <= tol)) report.failures.push_back({pi, i, a, numeric, rel});
    }
  }
  return report;
}

}  // namespace fedstgcrn
