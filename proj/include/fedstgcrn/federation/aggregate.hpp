// Uniform FedAvg over parameter bundles.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/params.hpp"

namespace fedstgcrn {

// Elementwise mean with equal weights, computed as
//   x_0 + sum_i (x_i - x_0) / M
// in double, one element at a time, in the order given. Because the shift
// uses the first bundle, M identical bundles reproduce it bit for bit.
// Callers fix the order (by client id) so summation is reproducible.
template <typename T>
ParamBundle<T> fedavg_aggregate(std::span<const ParamBundle<T>> bundles) {
  if (bundles.empty()) throw FederationError("fedavg_aggregate: no bundles");
  const Manifest manifest = bundles[0].manifest();
  for (std::size_t m = 1; m < bundles.size(); ++m) {
    require_same_manifest(manifest, bundles[m].manifest(), "fedavg_aggregate (bundle #" + std::to_string(m) + ")");
  }
  const double count = static_cast<double>(bundles.size());
  ParamBundle<T> out(bundles[0]);
  for (std::size_t t = 0; t < out.tensor_count(); ++t) {
    auto dst = out.entries()[t].tensor.mutable_values();
    const auto base = bundles[0].entries()[t].tensor.values();
    for (std::size_t j = 0; j < dst.size(); ++j) {
      const double x0 = static_cast<double>(base[j]);
      double shift = 0.0;
      for (std::size_t m = 1; m < bundles.size(); ++m) {
        shift += (static_cast<double>(bundles[m].entries()[t].tensor.values()[j]) - x0) / count;
      }
      dst[j] = static_cast<T>(x0 + shift);
    }
  }
  out.set_requires_grad(false);
  return out;
}

template <typename T>
ParamBundle<T> fedavg_aggregate(const std::vector<ParamBundle<T>>& bundles) {
  return fedavg_aggregate<T>(std::span<const ParamBundle<T>>(bundles));
}

}  // namespace fedstgcrn
