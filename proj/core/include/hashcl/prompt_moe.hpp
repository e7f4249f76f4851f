#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hashcl/matrix.hpp"
#include "hashcl/rng.hpp"

namespace hashcl {

/// The shared pool of prompt experts attached to one injected encoder layer.
/// Every prompt is prompt_length x dim; prompt_length must be even so the
/// composed prompt splits into equal key and value halves.
class PromptPool {
 public:
  PromptPool() = default;
  PromptPool(std::size_t layer, std::size_t num_experts, std::size_t prompt_length,
             std::size_t dim);
  PromptPool(std::size_t layer, std::vector<Matrix> prompts);

  void init_uniform(Rng& rng, double scale);

  std::size_t layer() const noexcept { return layer_; }
  std::size_t num_experts() const noexcept { return prompts_.size(); }
  std::size_t prompt_length() const noexcept { return prompt_length_; }
  std::size_t dim() const noexcept { return dim_; }

  const Matrix& prompt(std::size_t e) const { return prompts_.at(e); }
  Matrix& prompt(std::size_t e) { return prompts_.at(e); }
  const std::vector<Matrix>& prompts() const noexcept { return prompts_; }

 private:
  std::size_t layer_ = 0;
  std::size_t prompt_length_ = 0;
  std::size_t dim_ = 0;
  std::vector<Matrix> prompts_;
};

/// Per-task router: one d x K scoring matrix per injected layer, plus the
/// history penalty (psi per expert) frozen when the task started. The penalty
/// acts as a fixed score bias for this task in training and at inference.
struct TaskRouter {
  std::size_t task = 0;
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> penalties;  // per layer; empty when HDR is off
};

struct RoutingDecision {
  std::vector<double> raw_scores;        // length K
  std::vector<double> penalized_scores;  // length K; equals raw_scores without HDR
  std::vector<std::size_t> selected;     // ascending, size top-k
  std::vector<double> weights;           // alpha, aligned with selected
  double entropy = 0.0;
};

struct ComposedPrompt {
  Matrix full;   // L_p x d
  Matrix key;    // first L_p/2 rows
  Matrix value;  // last L_p/2 rows
};

/// mean over rows of (x * W_r / sqrt(d)).
std::vector<double> route_scores(const Matrix& x, const Matrix& router_weight);
std::vector<double> route_scores(const Matrix& x, const TaskRouter& router, std::size_t slot);

/// Indices of the k largest scores, lowest index winning ties, sorted ascending.
std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k);

std::vector<double> normalize_weights(std::span<const double> scores,
                                      std::span<const std::size_t> selected);

ComposedPrompt compose_prompt(const PromptPool& pool, std::span<const std::size_t> selected,
                              std::span<const double> alpha);

double routing_entropy(std::span<const double> alpha);

/// Builds a complete decision. Selection and weighting both use
/// `selection_scores`; the raw scores are kept for reporting.
RoutingDecision make_decision(std::vector<double> raw_scores, std::vector<double> selection_scores,
                              std::size_t top_k);
/// Same, with a forced index set (used to hold routing fixed across perturbations).
RoutingDecision make_decision_fixed(std::vector<double> raw_scores,
                                    std::vector<double> selection_scores,
                                    std::vector<std::size_t> selected);

struct PromptGradients {
  std::vector<std::size_t> experts;  // the selected experts
  std::vector<Matrix> grads;         // alpha_e * upstream, aligned with experts
  std::vector<double> score_grads;   // length K, zero outside the selection

  // Gradient for any expert of the pool; zero matrix when not selected.
  Matrix expert_gradient(std::size_t e, std::size_t rows, std::size_t cols) const;
};

/// Backward through composition and the top-k softmax (selection is treated as constant).
PromptGradients prompt_backward(const Matrix& upstream, const RoutingDecision& decision,
                                const PromptPool& pool);

/// dL/dW_r given dL/ds for one routing call on x.
Matrix router_weight_gradient(const Matrix& x, std::span<const double> score_grads);

struct ParameterCountConfig {
  std::size_t tasks = 10;
  std::size_t num_experts = 15;
  std::size_t prompt_length = 15;
  std::size_t dim = 768;
  std::size_t shared_layers = 4;
  std::size_t top_k = 2;
  std::size_t static_layers = 4;
  std::size_t static_prompt_length = 20;
  // Per-task prefix prompts hold separate key and value prefixes of the
  // static length each.
  bool static_key_value_prefix = true;
};

struct ParameterCounts {
  std::uint64_t shared_per_layer = 0;
  std::uint64_t static_per_layer = 0;
  std::uint64_t shared_total = 0;
  std::uint64_t static_total = 0;
  bool shared_is_smaller = false;
};

ParameterCounts count_parameters(const ParameterCountConfig& config);

}  // namespace hashcl
