#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hashcl/grad.hpp"
#include "hashcl/history.hpp"
#include "hashcl/matrix.hpp"
#include "hashcl/prompt_moe.hpp"
#include "hashcl/rng.hpp"

namespace hashcl {

struct EncoderConfig {
  std::size_t n_layers = 4;
  std::size_t dim = 32;
  std::size_t n_heads = 4;
  std::size_t tokens = 8;
  std::size_t raw_dim = 16;
  std::size_t mlp_ratio = 4;
  // Init std multiplier for the attention output and second MLP matrices, so
  // the residual stream starts close to the lifted input.
  double residual_init_scale = 0.3;
  // Zero-based indices of the layers that receive a composed prompt.
  std::vector<std::size_t> injected_layers{0, 1, 2, 3};

  std::size_t head_dim() const noexcept { return n_heads == 0 ? 0 : dim / n_heads; }
  void validate() const;
};

struct LayerWeights {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix ln2_gain, ln2_bias;
  Matrix w1, b1, w2, b2;
};

/// Backbone weights. `projection` is the fixed raw-feature-to-token lift and is
/// never trained; everything else is trained only during pretraining.
struct EncoderWeights {
  Matrix projection;  // raw_dim x (tokens * dim)
  std::vector<LayerWeights> layers;
  Matrix final_gain, final_bias;

  static EncoderWeights init(const EncoderConfig& cfg, Rng& rng);

  std::vector<std::pair<std::string, Matrix*>> trainable();
  std::vector<std::pair<std::string, const Matrix*>> trainable() const;
};

/// tokens x dim matrix obtained by lifting a raw feature vector.
Matrix lift_tokens(std::span<const double> raw, const EncoderWeights& weights,
                   const EncoderConfig& cfg);

struct LayerNormCache {
  Matrix normalized;
  std::vector<double> inv_std;
};

struct LayerCache {
  Matrix input;
  LayerNormCache ln1;
  Matrix u, q, k, v;
  bool prompted = false;
  Matrix prompt_key, prompt_value;
  std::vector<Matrix> probs;  // per head: tokens x (prompt rows + tokens)
  Matrix attn;                // concatenated head outputs
  Matrix mid;                 // after the attention residual
  LayerNormCache ln2;
  Matrix m, pre, act;
};

struct ForwardCache {
  bool valid = false;
  Matrix tokens;
  std::vector<LayerCache> layers;
  Matrix final_input;
  LayerNormCache final_ln;
};

struct EncoderOutput {
  std::vector<double> pooled;
  std::vector<RoutingDecision> decisions;  // one per injected layer when instructed
};

/// Key/value prompt rows for one layer; both null for an unprompted layer.
struct PromptHalves {
  const Matrix* key = nullptr;
  const Matrix* value = nullptr;
};

/// softmax(Q K'^T / sqrt(d_H)) V' per head, with K' and V' the prompt halves
/// stacked above K and V. The d columns are split evenly across heads.
Matrix augmented_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                           const Matrix* prompt_key, const Matrix* prompt_value,
                           std::size_t n_heads, std::vector<Matrix>* probs_out = nullptr);

struct AttentionGradients {
  Matrix q, k, v, prompt_key, prompt_value;
};

AttentionGradients augmented_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                                const Matrix* prompt_key,
                                                const Matrix* prompt_value,
                                                const std::vector<Matrix>& probs,
                                                const Matrix& d_out, std::size_t n_heads);

/// Runs the block stack on a token matrix. `prompts` is empty or holds one
/// entry per layer.
std::vector<double> encode(const EncoderWeights& weights, const EncoderConfig& cfg,
                           const Matrix& tokens, std::span<const PromptHalves> prompts,
                           ForwardCache* cache);

EncoderOutput forward_uninstructed(const EncoderWeights& weights, const EncoderConfig& cfg,
                                   const Matrix& tokens, ForwardCache* cache = nullptr);

struct RoutingContext {
  const TaskRouter* router = nullptr;
  std::span<const PromptPool> pools;  // one per injected layer, in injected order
  std::size_t top_k = 2;
  // Subtract the router's stored history penalties before selection.
  bool apply_penalty = false;
  HistoryLedger* ledger = nullptr;  // receives activation counts when recording
  bool record_activations = false;
  bool weights_from_penalized = true;
  // Optional forced selection per injected layer; holds routing fixed for gradient checks.
  const std::vector<std::vector<std::size_t>>* fixed_selection = nullptr;
};

EncoderOutput forward_instructed(const EncoderWeights& weights, const EncoderConfig& cfg,
                                 const Matrix& tokens, const RoutingContext& routing,
                                 ForwardCache* cache = nullptr,
                                 std::vector<ComposedPrompt>* composed_out = nullptr);

struct EncoderGradients {
  std::vector<Matrix> prompt_key;    // per layer; empty matrix when unprompted
  std::vector<Matrix> prompt_value;
  Matrix tokens;                     // only filled when propagated down to the input
};

/// Backward from dL/d(pooled). Weight gradients are accumulated into
/// `weight_grads` (names "encoder.<param>") when it is non-null; otherwise
/// propagation stops below the lowest prompted layer.
EncoderGradients encoder_backward(const EncoderWeights& weights, const EncoderConfig& cfg,
                                  const ForwardCache& cache, std::span<const double> d_pooled,
                                  GradTape* weight_grads);

/// Carries the per-layer prompt gradients through composition and routing into
/// per-expert ("pool.<slot>.<expert>") and router ("router.<task>.<slot>")
/// gradients. HGM factors are applied to expert gradients when `modulator`
/// enables it and `ledger` is given.
void accumulate_prompt_gradients(const EncoderGradients& grads, const EncoderConfig& cfg,
                                 const Matrix& tokens, std::span<const RoutingDecision> decisions,
                                 std::span<const PromptPool> pools, std::size_t task,
                                 const HistoryLedger* ledger, const ModulatorConfig* modulator,
                                 GradTape& tape);

std::string expert_param_name(std::size_t slot, std::size_t expert);
std::string router_param_name(std::size_t task, std::size_t slot);

}  // namespace hashcl
