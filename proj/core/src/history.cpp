#include "hashcl/history.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hashcl/errors.hpp"

namespace hashcl {

std::string to_string(PenaltyVariant v) {
  switch (v) {
    case PenaltyVariant::stepwise:
      return "stepwise";
    case PenaltyVariant::logarithmic:
      return "logarithmic";
    case PenaltyVariant::polynomial:
      return "polynomial";
  }
  return "unknown";
}

std::string to_string(DecayVariant v) {
  switch (v) {
    case DecayVariant::piecewise:
      return "piecewise";
    case DecayVariant::inverse:
      return "inverse";
    case DecayVariant::exponential:
      return "exponential";
  }
  return "unknown";
}

PenaltyVariant parse_penalty_variant(const std::string& name) {
  if (name == "stepwise") return PenaltyVariant::stepwise;
  if (name == "logarithmic") return PenaltyVariant::logarithmic;
  if (name == "polynomial") return PenaltyVariant::polynomial;
  throw ConfigError("unknown penalty variant '" + name + "'");
}

DecayVariant parse_decay_variant(const std::string& name) {
  if (name == "piecewise") return DecayVariant::piecewise;
  if (name == "inverse") return DecayVariant::inverse;
  if (name == "exponential") return DecayVariant::exponential;
  throw ConfigError("unknown decay variant '" + name + "'");
}

void ModulatorConfig::validate() const {
  if (!(delta > 0.0)) {
    throw ConfigError("delta must be positive, got " + std::to_string(delta));
  }
  if (!(alpha_decay > 0.0 && alpha_decay < 1.0)) {
    throw ConfigError("alpha_decay must lie in (0, 1), got " + std::to_string(alpha_decay));
  }
  if (!(beta > 0.0)) {
    throw ConfigError("beta must be positive, got " + std::to_string(beta));
  }
  if (!(poly_exponent > 0.0)) {
    throw ConfigError("poly_exponent must be positive, got " + std::to_string(poly_exponent));
  }
}

HistoryLedger::HistoryLedger(std::size_t num_layers, std::size_t num_experts, std::size_t top_k)
    : num_experts_(num_experts),
      top_k_(top_k),
      counts_(num_layers, std::vector<std::uint64_t>(num_experts, 0)),
      frozen_counts_(num_layers, std::vector<std::uint64_t>(num_experts, 0)),
      protected_(num_layers) {
  if (top_k > num_experts) {
    throw ConfigError("top-k " + std::to_string(top_k) + " exceeds number of experts " +
                      std::to_string(num_experts));
  }
}

void HistoryLedger::update(const RoutingDecision& decision, std::size_t layer) {
  auto& row = counts_.at(layer);
  for (std::size_t e : decision.selected) {
    if (e >= row.size()) {
      throw ArgumentError("decision selects expert " + std::to_string(e) + " outside the pool");
    }
    ++row[e];
  }
}

void HistoryLedger::freeze_protected_set(std::size_t task) {
  if (frozen_task_ && task <= *frozen_task_) {
    throw StateError("protected set already frozen for task " + std::to_string(*frozen_task_) +
                     "; cannot freeze task " + std::to_string(task));
  }
  for (std::size_t l = 0; l < counts_.size(); ++l) {
    const auto& row = counts_[l];
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::vector<std::size_t> chosen;
    for (std::size_t i = 0; i < order.size() && chosen.size() < top_k_; ++i) {
      if (row[order[i]] > 0) {
        chosen.push_back(order[i]);
      }
    }
    std::sort(chosen.begin(), chosen.end());
    protected_[l] = std::move(chosen);
    frozen_counts_[l] = row;
  }
  frozen_task_ = task;
}

bool HistoryLedger::is_protected(std::size_t layer, std::size_t expert) const {
  const auto& set = protected_.at(layer);
  return std::binary_search(set.begin(), set.end(), expert);
}

void HistoryLedger::restore(std::vector<std::vector<std::uint64_t>> counts,
                            std::vector<std::vector<std::uint64_t>> frozen_counts,
                            std::vector<std::vector<std::size_t>> protected_sets,
                            std::optional<std::size_t> frozen_task) {
  if (counts.size() != frozen_counts.size() || counts.size() != protected_sets.size()) {
    throw DimensionError("ledger restore: layer count mismatch");
  }
  counts_ = std::move(counts);
  frozen_counts_ = std::move(frozen_counts);
  protected_ = std::move(protected_sets);
  frozen_task_ = frozen_task;
  num_experts_ = counts_.empty() ? 0 : counts_.front().size();
}

std::vector<double> history_penalties(const HistoryLedger& ledger, std::size_t layer,
                                      const ModulatorConfig& cfg) {
  const auto counts = ledger.frozen_counts(layer);
  std::vector<double> psi(counts.size(), 0.0);
  for (std::size_t e = 0; e < counts.size(); ++e) {
    const double h = static_cast<double>(counts[e]);
    switch (cfg.penalty) {
      case PenaltyVariant::stepwise:
        psi[e] = ledger.is_protected(layer, e) ? cfg.delta : 0.0;
        break;
      case PenaltyVariant::logarithmic:
        psi[e] = std::log1p(h);
        break;
      case PenaltyVariant::polynomial:
        psi[e] = std::pow(h, cfg.poly_exponent);
        break;
    }
  }
  return psi;
}

std::vector<double> hdr_penalize(std::span<const double> scores, const HistoryLedger& ledger,
                                 std::size_t layer, const ModulatorConfig& cfg) {
  if (scores.size() != ledger.num_experts()) {
    throw DimensionError("hdr_penalize: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(ledger.num_experts()) + " experts");
  }
  const auto psi = history_penalties(ledger, layer, cfg);
  std::vector<double> out(scores.begin(), scores.end());
  for (std::size_t e = 0; e < out.size(); ++e) {
    out[e] -= psi[e];
  }
  return out;
}

std::vector<double> hgm_factors(const HistoryLedger& ledger, std::size_t layer,
                                const ModulatorConfig& cfg) {
  const auto counts = ledger.frozen_counts(layer);
  std::vector<double> gamma(counts.size(), 1.0);
  for (std::size_t e = 0; e < counts.size(); ++e) {
    const double h = static_cast<double>(counts[e]);
    switch (cfg.decay) {
      case DecayVariant::piecewise:
        gamma[e] = ledger.is_protected(layer, e) ? cfg.alpha_decay : 1.0;
        break;
      case DecayVariant::inverse:
        gamma[e] = 1.0 / (1.0 + cfg.beta * h);
        break;
      case DecayVariant::exponential:
        // Floor at the smallest normal double so the factor stays in (0, 1].
        gamma[e] = std::max(std::exp(-cfg.beta * h), std::numeric_limits<double>::min());
        break;
    }
  }
  return gamma;
}

void hgm_scale(std::span<Matrix> expert_grads, const HistoryLedger& ledger, std::size_t layer,
               const ModulatorConfig& cfg) {
  if (expert_grads.size() != ledger.num_experts()) {
    throw DimensionError("hgm_scale: gradient count does not match the pool");
  }
  const auto gamma = hgm_factors(ledger, layer, cfg);
  for (std::size_t e = 0; e < expert_grads.size(); ++e) {
    if (gamma[e] != 1.0) {
      for (double& v : expert_grads[e].values()) {
        v *= gamma[e];
      }
    }
  }
}

double route_objective_value(std::span<const double> p, std::span<const double> scores,
                             std::span<const double> penalties) {
  if (p.size() != scores.size() || p.size() != penalties.size()) {
    throw DimensionError("route_objective_value: length mismatch");
  }
  double total = 0.0;
  for (double v : p) {
    if (v < -1e-9) {
      throw ArgumentError("route_objective_value: negative probability");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ArgumentError("route_objective_value: p sums to " + std::to_string(total) +
                        ", not on the simplex");
  }
  double value = 0.0;
  for (std::size_t e = 0; e < p.size(); ++e) {
    value += p[e] * (-scores[e]) + p[e] * penalties[e];
  }
  return value;
}

double route_objective_value(std::span<const double> p, std::span<const double> scores,
                             const HistoryLedger& ledger, std::size_t layer,
                             const ModulatorConfig& cfg) {
  const auto psi = history_penalties(ledger, layer, cfg);
  return route_objective_value(p, scores, psi);
}

double history_regularizer(const Matrix& theta, const Matrix& theta_prev, double activations) {
  if (!theta.same_shape(theta_prev)) {
    throw DimensionError("history_regularizer: " + theta.shape_string() + " vs " +
                         theta_prev.shape_string());
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double d = theta.values()[i] - theta_prev.values()[i];
    sq += d * d;
  }
  return 0.5 * activations * sq;
}

}  // namespace hashcl
