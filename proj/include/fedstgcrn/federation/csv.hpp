// Client-side validation: choose which aggregated modules to adopt by
// scoring every module subset on the local validation windows.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/params.hpp"
#include "fedstgcrn/training.hpp"

namespace fedstgcrn {

// Validation loss per module subset, indexed by ModuleSet::bits(). An empty
// slot means the subset was not scored (round 0, plain FedAvg) or produced
// a non-finite loss and was discarded.
struct SubsetLosses {
  std::array<std::optional<double>, 8> slots{};

  std::optional<double> operator[](ModuleSet s) const { return slots[s.bits()]; }
  void set(ModuleSet s, double v) { slots[s.bits()] = v; }
  std::size_t scored() const {
    std::size_t n = 0;
    for (const auto& s : slots) n += s.has_value();
    return n;
  }
};

struct RoundLog {
  std::size_t round = 0;
  SubsetLosses subset_losses;
  ModuleSet chosen;
  double post_train_val_loss = 0.0;
  double best_val_loss = 0.0;  // client's best checkpoint after the round
  bool csv_enabled = true;
  std::vector<std::string> warnings;

  double chosen_loss() const { return *subset_losses[chosen]; }
};

template <typename T>
struct CsvResult {
  ParamBundle<T> integrated;
  RoundLog log;
};

// Scores all 8 candidates (modules in S from `aggregated`, the rest from
// `local`) and returns the first minimum in subsets_in_tie_order().
template <typename T>
CsvResult<T> csv_validate(const ModelConfig& cfg, const ParamBundle<T>& local, const ParamBundle<T>& aggregated,
                          const WindowSet& val, LossKind kind) {
  require_same_manifest(local.manifest(), aggregated.manifest(), "csv_validate");
  if (val.count == 0) throw TrainingError("csv_validate: empty validation set");

  CsvResult<T> result;
  std::optional<ModuleSet> best;
  std::optional<NumericError> keep_failure;
  for (ModuleSet s : subsets_in_tie_order()) {
    double v = 0.0;
    try {
      v = dataset_loss(cfg, local.with_modules_from(aggregated, s), val, kind);
    } catch (const NumericError& e) {
      result.log.warnings.push_back("candidate " + s.to_string() + " discarded: " + e.what());
      if (s.empty()) keep_failure = e;
      continue;
    }
    if (!std::isfinite(v)) {
      result.log.warnings.push_back("candidate " + s.to_string() + " discarded: non-finite loss");
      if (s.empty()) keep_failure = NumericError("csv_validate: local parameters give a non-finite loss");
      continue;
    }
    result.log.subset_losses.set(s, v);
    if (!best || v < *result.log.subset_losses[*best]) best = s;
  }
  // Keeping the local parameters must always be an option.
  if (keep_failure) throw *keep_failure;
  result.log.chosen = *best;
  result.integrated = local.with_modules_from(aggregated, *best);
  return result;
}

}  // namespace fedstgcrn
