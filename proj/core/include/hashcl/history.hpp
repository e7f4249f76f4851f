#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hashcl/matrix.hpp"
#include "hashcl/prompt_moe.hpp"

namespace hashcl {

enum class PenaltyVariant { stepwise, logarithmic, polynomial };
enum class DecayVariant { piecewise, inverse, exponential };

std::string to_string(PenaltyVariant v);
std::string to_string(DecayVariant v);
PenaltyVariant parse_penalty_variant(const std::string& name);
DecayVariant parse_decay_variant(const std::string& name);

struct ModulatorConfig {
  bool hdr_enabled = true;
  bool hgm_enabled = true;
  double delta = 0.4;        // stepwise score deduction
  double alpha_decay = 0.1;  // piecewise gradient factor
  double beta = 1.0;         // rate for inverse / exponential decay
  double poly_exponent = 1.5;
  PenaltyVariant penalty = PenaltyVariant::stepwise;
  DecayVariant decay = DecayVariant::piecewise;
  // Keep each router's frozen penalties as a score bias when inferring.
  bool hdr_at_inference = true;

  void validate() const;
};

/// Cumulative expert activation counts per injected layer and the protected
/// set frozen at each task boundary.
class HistoryLedger {
 public:
  HistoryLedger() = default;
  HistoryLedger(std::size_t num_layers, std::size_t num_experts, std::size_t top_k);

  void update(const RoutingDecision& decision, std::size_t layer);
  // Freezes A_t (and the count snapshot used by continuous variants) for task t.
  void freeze_protected_set(std::size_t task);

  std::size_t num_layers() const noexcept { return counts_.size(); }
  std::size_t num_experts() const noexcept { return num_experts_; }
  std::size_t top_k() const noexcept { return top_k_; }
  std::optional<std::size_t> frozen_task() const noexcept { return frozen_task_; }

  std::span<const std::uint64_t> counts(std::size_t layer) const { return counts_.at(layer); }
  std::span<const std::uint64_t> frozen_counts(std::size_t layer) const {
    return frozen_counts_.at(layer);
  }
  std::span<const std::size_t> protected_set(std::size_t layer) const {
    return protected_.at(layer);
  }
  bool is_protected(std::size_t layer, std::size_t expert) const;

  // Used when restoring from a checkpoint.
  void restore(std::vector<std::vector<std::uint64_t>> counts,
               std::vector<std::vector<std::uint64_t>> frozen_counts,
               std::vector<std::vector<std::size_t>> protected_sets,
               std::optional<std::size_t> frozen_task);

 private:
  std::size_t num_experts_ = 0;
  std::size_t top_k_ = 0;
  std::vector<std::vector<std::uint64_t>> counts_;
  std::vector<std::vector<std::uint64_t>> frozen_counts_;
  std::vector<std::vector<std::size_t>> protected_;
  std::optional<std::size_t> frozen_task_;
};

/// psi(H_e) for every expert of one layer, given the frozen ledger state.
std::vector<double> history_penalties(const HistoryLedger& ledger, std::size_t layer,
                                      const ModulatorConfig& cfg);
std::vector<double> hdr_penalize(std::span<const double> scores, const HistoryLedger& ledger,
                                 std::size_t layer, const ModulatorConfig& cfg);

/// gamma(H_e) for every expert of one layer; each factor lies in (0, 1].
std::vector<double> hgm_factors(const HistoryLedger& ledger, std::size_t layer,
                                const ModulatorConfig& cfg);
void hgm_scale(std::span<Matrix> expert_grads, const HistoryLedger& ledger, std::size_t layer,
               const ModulatorConfig& cfg);

double route_objective_value(std::span<const double> p, std::span<const double> scores,
                             std::span<const double> penalties);
double route_objective_value(std::span<const double> p, std::span<const double> scores,
                             const HistoryLedger& ledger, std::size_t layer,
                             const ModulatorConfig& cfg);

/// 0.5 * H * ||theta - theta_prev||^2
double history_regularizer(const Matrix& theta, const Matrix& theta_prev, double activations);

}  // namespace hashcl
