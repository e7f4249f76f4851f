#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "hashcl/history.hpp"

namespace hashcl {

/// a(i, t): accuracy on task i after training task t, zero-based, i <= t.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks = 0);

  std::size_t tasks() const noexcept { return tasks_; }
  void set(std::size_t task, std::size_t after, double accuracy);
  bool has(std::size_t task, std::size_t after) const;
  double at(std::size_t task, std::size_t after) const;

 private:
  std::size_t tasks_;
  std::vector<std::optional<double>> cells_;
};

/// Mean of the final column.
double compute_faa(const AccuracyMatrix& a);
/// Mean over t of the running averages A_t = mean_{i<=t} a(i, t).
double compute_caa(const AccuracyMatrix& a);
/// Mean over earlier tasks of max_{t<T} (a(i, t) - a(i, T)); absent for T = 1.
/// Not clamped, so backward transfer shows up as a negative value.
std::optional<double> compute_fm(const AccuracyMatrix& a);

struct LayerUtilization {
  std::vector<double> frequencies;
  double variance = 0.0;  // population variance over experts
  double max_min_ratio = 0.0;  // meaningful only when !ratio_infinite
  bool ratio_infinite = false;  // some expert was never used
};

struct UtilizationReport {
  std::vector<LayerUtilization> layers;
  double mean_variance() const;
};

UtilizationReport utilization_report(const HistoryLedger& ledger);
LayerUtilization layer_utilization(std::span<const std::uint64_t> counts);

}  // namespace hashcl
