#include "hashcl/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "hashcl/errors.hpp"

namespace hashcl {

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) : tasks_(tasks), cells_(tasks * tasks) {}

void AccuracyMatrix::set(std::size_t task, std::size_t after, double accuracy) {
  if (after >= tasks_ || task > after) {
    throw ArgumentError("accuracy cell (" + std::to_string(task) + ", " + std::to_string(after) +
                        ") is outside the lower triangle of a " + std::to_string(tasks_) +
                        "-task matrix");
  }
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) {
    throw ArgumentError("accuracy must lie in [0, 1], got " + std::to_string(accuracy));
  }
  cells_[task * tasks_ + after] = accuracy;
}

bool AccuracyMatrix::has(std::size_t task, std::size_t after) const {
  return task < tasks_ && after < tasks_ && cells_[task * tasks_ + after].has_value();
}

double AccuracyMatrix::at(std::size_t task, std::size_t after) const {
  if (!has(task, after)) {
    throw StateError("accuracy cell (" + std::to_string(task) + ", " + std::to_string(after) +
                     ") is missing");
  }
  return *cells_[task * tasks_ + after];
}

namespace {

void require_tasks(const AccuracyMatrix& a) {
  if (a.tasks() == 0) {
    throw StateError("accuracy matrix has no tasks");
  }
}

double running_average(const AccuracyMatrix& a, std::size_t t) {
  double sum = 0.0;
  for (std::size_t i = 0; i <= t; ++i) sum += a.at(i, t);
  return sum / static_cast<double>(t + 1);
}

}  // namespace

double compute_faa(const AccuracyMatrix& a) {
  require_tasks(a);
  return running_average(a, a.tasks() - 1);
}

double compute_caa(const AccuracyMatrix& a) {
  require_tasks(a);
  double sum = 0.0;
  for (std::size_t t = 0; t < a.tasks(); ++t) sum += running_average(a, t);
  return sum / static_cast<double>(a.tasks());
}

std::optional<double> compute_fm(const AccuracyMatrix& a) {
  require_tasks(a);
  const std::size_t last = a.tasks() - 1;
  if (last == 0) {
    return std::nullopt;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < last; ++i) {
    const double final_acc = a.at(i, last);
    double worst = a.at(i, i) - final_acc;
    for (std::size_t t = i + 1; t < last; ++t) worst = std::max(worst, a.at(i, t) - final_acc);
    sum += worst;
  }
  return sum / static_cast<double>(last);
}

LayerUtilization layer_utilization(std::span<const std::uint64_t> counts) {
  const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  if (counts.empty() || total == 0) {
    throw StateError("utilization needs at least one recorded activation");
  }
  LayerUtilization u;
  u.frequencies.reserve(counts.size());
  for (auto c : counts) {
    u.frequencies.push_back(static_cast<double>(c) / static_cast<double>(total));
  }
  const double n = static_cast<double>(counts.size());
  const double mean = 1.0 / n;
  for (double f : u.frequencies) u.variance += (f - mean) * (f - mean);
  u.variance /= n;
  const auto [lo, hi] = std::minmax_element(u.frequencies.begin(), u.frequencies.end());
  if (*lo == 0.0) {
    u.ratio_infinite = true;
  } else {
    u.max_min_ratio = *hi / *lo;
  }
  return u;
}

UtilizationReport utilization_report(const HistoryLedger& ledger) {
  if (ledger.num_layers() == 0) {
    throw StateError("utilization report of an empty ledger");
  }
  UtilizationReport report;
  for (std::size_t l = 0; l < ledger.num_layers(); ++l) {
    report.layers.push_back(layer_utilization(ledger.counts(l)));
  }
  return report;
}

double UtilizationReport::mean_variance() const {
  if (layers.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& l : layers) sum += l.variance;
  return sum / static_cast<double>(layers.size());
}

}  // namespace hashcl
