#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hashcl/config.hpp"

namespace hashcl {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t batch_size = 6;
  std::size_t samples_per_class = 4;
  std::size_t entries_per_tensor = 24;  // random entries probed per parameter tensor
  double step = 1e-4;  // central differences; smaller steps lose digits to cancellation
  double tolerance = kGradcheckTolerance;
  // Test fixture: perturbs the analytic gradient of one group so the check must fail.
  std::optional<std::string> corrupt_group;
};

struct GroupCheck {
  std::string group;  // prompts, routers, classifier, task_predictor, encoder
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::vector<std::string> offending;  // parameters above tolerance
  // False when the gradient is identically zero by construction (routers with top_k = 1).
  bool expects_entries = true;
  bool passed() const { return offending.empty() && (checked > 0 || !expects_entries); }
};

const std::vector<std::string>& gradcheck_groups();

/// Finite-difference suites on a small problem built from the config's model
/// shapes: prompts, routers and classifier through the WTP loss (routing held
/// fixed, CR active), the task predictor through the TII loss, and encoder
/// weights through a pretraining cross-entropy.
std::vector<GroupCheck> run_gradcheck(const ExperimentConfig& cfg,
                                      const GradcheckOptions& options = {});

}  // namespace hashcl
