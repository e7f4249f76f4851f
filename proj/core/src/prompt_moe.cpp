#include "hashcl/prompt_moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hashcl/errors.hpp"

namespace hashcl {

PromptPool::PromptPool(std::size_t layer, std::size_t num_experts, std::size_t prompt_length,
                       std::size_t dim)
    : layer_(layer), prompt_length_(prompt_length), dim_(dim) {
  if (num_experts == 0) {
    throw ConfigError("prompt pool needs at least one expert");
  }
  if (prompt_length % 2 != 0) {
    throw ConfigError("prompt length " + std::to_string(prompt_length) +
                      " must be even to split into key and value halves");
  }
  prompts_.assign(num_experts, Matrix(prompt_length, dim));
}

PromptPool::PromptPool(std::size_t layer, std::vector<Matrix> prompts)
    : layer_(layer), prompts_(std::move(prompts)) {
  if (prompts_.empty()) {
    throw ConfigError("prompt pool needs at least one expert");
  }
  prompt_length_ = prompts_.front().rows();
  dim_ = prompts_.front().cols();
  if (prompt_length_ % 2 != 0) {
    throw ConfigError("prompt length " + std::to_string(prompt_length_) +
                      " must be even to split into key and value halves");
  }
  for (const auto& p : prompts_) {
    if (p.rows() != prompt_length_ || p.cols() != dim_) {
      throw DimensionError("prompt pool experts must share one shape");
    }
    require_finite(p, "prompt pool");
  }
}

void PromptPool::init_uniform(Rng& rng, double scale) {
  for (auto& p : prompts_) {
    p = rng.uniform_matrix(prompt_length_, dim_, -scale, scale);
  }
}

std::vector<double> route_scores(const Matrix& x, const Matrix& router_weight) {
  if (x.cols() != router_weight.rows()) {
    throw DimensionError("route_scores: tokens " + x.shape_string() + " vs router " +
                         router_weight.shape_string());
  }
  const std::size_t k = router_weight.cols();
  std::vector<double> scores(k, 0.0);
  if (x.rows() == 0) {
    return scores;
  }
  const Matrix projected = matmul(x, router_weight);
  const double norm = std::sqrt(static_cast<double>(x.cols()));
  for (std::size_t r = 0; r < projected.rows(); ++r) {
    const auto row = projected.row(r);
    for (std::size_t e = 0; e < k; ++e) {
      scores[e] += row[e] / norm;
    }
  }
  const double inv_len = 1.0 / static_cast<double>(x.rows());
  for (double& s : scores) {
    s *= inv_len;
  }
  return scores;
}

std::vector<double> route_scores(const Matrix& x, const TaskRouter& router, std::size_t slot) {
  if (slot >= router.weights.size()) {
    throw ConfigError("router for task " + std::to_string(router.task) + " has no weights for slot " +
                      std::to_string(slot));
  }
  return route_scores(x, router.weights[slot]);
}

std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k) {
  if (k > scores.size()) {
    throw ArgumentError("top-k " + std::to_string(k) + " exceeds pool size " +
                        std::to_string(scores.size()));
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<double> normalize_weights(std::span<const double> scores,
                                      std::span<const std::size_t> selected) {
  if (selected.empty()) {
    throw ArgumentError("normalize_weights needs a nonempty selection");
  }
  std::vector<double> picked;
  picked.reserve(selected.size());
  for (std::size_t idx : selected) {
    if (idx >= scores.size()) {
      throw ArgumentError("selected index " + std::to_string(idx) + " out of range");
    }
    picked.push_back(scores[idx]);
  }
  return softmax(picked, 1.0);
}

ComposedPrompt compose_prompt(const PromptPool& pool, std::span<const std::size_t> selected,
                              std::span<const double> alpha) {
  if (selected.size() != alpha.size()) {
    throw ArgumentError("compose_prompt: " + std::to_string(selected.size()) + " experts but " +
                        std::to_string(alpha.size()) + " weights");
  }
  const double total = std::accumulate(alpha.begin(), alpha.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-12) {
    throw ArgumentError("compose_prompt: weights sum to " + std::to_string(total));
  }
  Matrix composed(pool.prompt_length(), pool.dim());
  for (std::size_t i = 0; i < selected.size(); ++i) {
    add_scaled(composed, pool.prompt(selected[i]), alpha[i]);
  }
  const std::size_t half = pool.prompt_length() / 2;
  ComposedPrompt out;
  out.key = row_slice(composed, 0, half);
  out.value = row_slice(composed, half, half);
  out.full = std::move(composed);
  return out;
}

double routing_entropy(std::span<const double> alpha) {
  double h = 0.0;
  for (double a : alpha) {
    if (a > 0.0) {
      h -= a * std::log(a);
    }
  }
  return std::max(h, 0.0);
}

RoutingDecision make_decision(std::vector<double> raw_scores, std::vector<double> selection_scores,
                              std::size_t top_k) {
  auto selected = select_top_k(selection_scores, top_k);
  return make_decision_fixed(std::move(raw_scores), std::move(selection_scores),
                             std::move(selected));
}

RoutingDecision make_decision_fixed(std::vector<double> raw_scores,
                                    std::vector<double> selection_scores,
                                    std::vector<std::size_t> selected) {
  RoutingDecision d;
  d.weights = normalize_weights(selection_scores, selected);
  d.entropy = routing_entropy(d.weights);
  d.raw_scores = std::move(raw_scores);
  d.penalized_scores = std::move(selection_scores);
  d.selected = std::move(selected);
  return d;
}

Matrix PromptGradients::expert_gradient(std::size_t e, std::size_t rows, std::size_t cols) const {
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (experts[i] == e) {
      return grads[i];
    }
  }
  return Matrix(rows, cols);
}

PromptGradients prompt_backward(const Matrix& upstream, const RoutingDecision& decision,
                                const PromptPool& pool) {
  if (upstream.rows() != pool.prompt_length() || upstream.cols() != pool.dim()) {
    throw DimensionError("prompt_backward: upstream " + upstream.shape_string() +
                         " does not match prompts (" + std::to_string(pool.prompt_length()) + "x" +
                         std::to_string(pool.dim()) + ")");
  }
  if (decision.selected.size() != decision.weights.size()) {
    throw ArgumentError("prompt_backward: malformed routing decision");
  }
  PromptGradients out;
  out.experts = decision.selected;
  out.score_grads.assign(pool.num_experts(), 0.0);

  // dL/dalpha_e = <p_e, upstream>; then back through the softmax over the selection.
  std::vector<double> alpha_grads(decision.selected.size());
  double weighted = 0.0;
  for (std::size_t i = 0; i < decision.selected.size(); ++i) {
    alpha_grads[i] = dot(pool.prompt(decision.selected[i]).values(), upstream.values());
    weighted += decision.weights[i] * alpha_grads[i];
    out.grads.push_back(scaled(upstream, decision.weights[i]));
  }
  for (std::size_t i = 0; i < decision.selected.size(); ++i) {
    out.score_grads[decision.selected[i]] = decision.weights[i] * (alpha_grads[i] - weighted);
  }
  return out;
}

Matrix router_weight_gradient(const Matrix& x, std::span<const double> score_grads) {
  const std::vector<double> mean = column_mean(x);
  const double norm = std::sqrt(static_cast<double>(x.cols()));
  Matrix grad(x.cols(), score_grads.size());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    auto row = grad.row(c);
    for (std::size_t e = 0; e < score_grads.size(); ++e) {
      row[e] = mean[c] * score_grads[e] / norm;
    }
  }
  return grad;
}

ParameterCounts count_parameters(const ParameterCountConfig& c) {
  ParameterCounts out;
  out.shared_per_layer = static_cast<std::uint64_t>(c.num_experts) * c.prompt_length * c.dim +
                         static_cast<std::uint64_t>(c.tasks) * c.dim * c.num_experts;
  const std::uint64_t prefix = c.static_key_value_prefix ? 2 : 1;
  out.static_per_layer = static_cast<std::uint64_t>(c.tasks) * prefix * c.static_prompt_length * c.dim;
  out.shared_total = out.shared_per_layer * c.shared_layers;
  out.static_total = out.static_per_layer * c.static_layers;
  out.shared_is_smaller = out.shared_total < out.static_total;
  return out;
}

}  // namespace hashcl
