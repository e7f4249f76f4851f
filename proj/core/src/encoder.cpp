#include "hashcl/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "hashcl/errors.hpp"

namespace hashcl {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void add_row_bias(Matrix& m, const Matrix& bias) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) {
      row[c] += bias(0, c);
    }
  }
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out = matmul(x, w);
  add_row_bias(out, b);
  return out;
}

Matrix column_sum(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) {
      out(0, c) += row[c];
    }
  }
  return out;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache* cache) {
  const std::size_t n = x.cols();
  Matrix normalized(x.rows(), n);
  std::vector<double> inv_std(x.rows());
  Matrix out(x.rows(), n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double z = (row[c] - mean) * is;
      normalized(r, c) = z;
      out(r, c) = z * gain(0, c) + bias(0, c);
    }
  }
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Matrix layer_norm_backward(const Matrix& d_out, const Matrix& gain, const LayerNormCache& cache,
                           Matrix* d_gain, Matrix* d_bias) {
  const std::size_t n = d_out.cols();
  Matrix dx(d_out.rows(), n);
  std::vector<double> dn(n);
  for (std::size_t r = 0; r < d_out.rows(); ++r) {
    const auto dy = d_out.row(r);
    const auto z = cache.normalized.row(r);
    double mean_dn = 0.0;
    double mean_dnz = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      dn[c] = dy[c] * gain(0, c);
      mean_dn += dn[c];
      mean_dnz += dn[c] * z[c];
      if (d_gain != nullptr) (*d_gain)(0, c) += dy[c] * z[c];
      if (d_bias != nullptr) (*d_bias)(0, c) += dy[c];
    }
    mean_dn /= static_cast<double>(n);
    mean_dnz /= static_cast<double>(n);
    for (std::size_t c = 0; c < n; ++c) {
      dx(r, c) = cache.inv_std[r] * (dn[c] - mean_dn - z[c] * mean_dnz);
    }
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void check_prompt_pair(const Matrix* key, const Matrix* value, std::size_t dim) {
  if ((key == nullptr) != (value == nullptr)) {
    throw DimensionError("prompt key and value halves must be both present or both absent");
  }
  if (key != nullptr) {
    if (!key->same_shape(*value)) {
      throw DimensionError("prompt key " + key->shape_string() + " and value " +
                           value->shape_string() + " halves differ in shape");
    }
    if (key->cols() != dim) {
      throw DimensionError("prompt halves have width " + std::to_string(key->cols()) +
                           ", attention uses " + std::to_string(dim));
    }
  }
}

// Row j of the augmented key/value matrix: prompt rows first, then the sequence.
inline double augmented(const Matrix* prompt, const Matrix& seq, std::size_t prompt_rows,
                        std::size_t j, std::size_t c) {
  return j < prompt_rows ? (*prompt)(j, c) : seq(j - prompt_rows, c);
}

void add_to(std::vector<std::pair<std::string, Matrix*>>& out, const std::string& name, Matrix& m) {
  out.emplace_back(name, &m);
}

}  // namespace

void EncoderConfig::validate() const {
  if (dim == 0 || n_heads == 0 || dim % n_heads != 0) {
    throw ConfigError("embedding dim " + std::to_string(dim) + " must be a positive multiple of " +
                      std::to_string(n_heads) + " heads");
  }
  if (!(residual_init_scale > 0.0)) {
    throw ConfigError("residual_init_scale must be > 0");
  }
  if (tokens == 0 || raw_dim == 0 || mlp_ratio == 0) {
    throw ConfigError("tokens, raw_dim and mlp_ratio must be positive");
  }
  for (std::size_t i = 0; i < injected_layers.size(); ++i) {
    if (injected_layers[i] >= n_layers) {
      throw ConfigError("injected layer " + std::to_string(injected_layers[i] + 1) +
                        " outside 1.." + std::to_string(n_layers));
    }
    if (i > 0 && injected_layers[i] <= injected_layers[i - 1]) {
      throw ConfigError("injected layers must be strictly increasing");
    }
  }
}

EncoderWeights EncoderWeights::init(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  const std::size_t hidden = d * cfg.mlp_ratio;
  EncoderWeights w;
  w.projection = rng.normal_matrix(cfg.raw_dim, cfg.tokens * d,
                                   1.0 / std::sqrt(static_cast<double>(cfg.raw_dim)));
  const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_h = 1.0 / std::sqrt(static_cast<double>(hidden));
  const double residual_scale = cfg.residual_init_scale;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain = Matrix(1, d, 1.0);
    lw.ln1_bias = Matrix(1, d);
    lw.wq = rng.normal_matrix(d, d, s_d);
    lw.bq = Matrix(1, d);
    lw.wk = rng.normal_matrix(d, d, s_d);
    lw.bk = Matrix(1, d);
    lw.wv = rng.normal_matrix(d, d, s_d);
    lw.bv = Matrix(1, d);
    lw.wo = rng.normal_matrix(d, d, s_d * residual_scale);
    lw.bo = Matrix(1, d);
    lw.ln2_gain = Matrix(1, d, 1.0);
    lw.ln2_bias = Matrix(1, d);
    lw.w1 = rng.normal_matrix(d, hidden, s_d);
    lw.b1 = Matrix(1, hidden);
    lw.w2 = rng.normal_matrix(hidden, d, s_h * residual_scale);
    lw.b2 = Matrix(1, d);
    w.layers.push_back(std::move(lw));
  }
  w.final_gain = Matrix(1, d, 1.0);
  w.final_bias = Matrix(1, d);
  return w;
}

std::vector<std::pair<std::string, Matrix*>> EncoderWeights::trainable() {
  std::vector<std::pair<std::string, Matrix*>> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& lw = layers[l];
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    add_to(out, p + "ln1_gain", lw.ln1_gain);
    add_to(out, p + "ln1_bias", lw.ln1_bias);
    add_to(out, p + "wq", lw.wq);
    add_to(out, p + "bq", lw.bq);
    add_to(out, p + "wk", lw.wk);
    add_to(out, p + "bk", lw.bk);
    add_to(out, p + "wv", lw.wv);
    add_to(out, p + "bv", lw.bv);
    add_to(out, p + "wo", lw.wo);
    add_to(out, p + "bo", lw.bo);
    add_to(out, p + "ln2_gain", lw.ln2_gain);
    add_to(out, p + "ln2_bias", lw.ln2_bias);
    add_to(out, p + "w1", lw.w1);
    add_to(out, p + "b1", lw.b1);
    add_to(out, p + "w2", lw.w2);
    add_to(out, p + "b2", lw.b2);
  }
  add_to(out, "encoder.final_gain", final_gain);
  add_to(out, "encoder.final_bias", final_bias);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> EncoderWeights::trainable() const {
  auto mutable_view = const_cast<EncoderWeights*>(this)->trainable();
  std::vector<std::pair<std::string, const Matrix*>> out;
  out.reserve(mutable_view.size());
  for (auto& [name, m] : mutable_view) {
    out.emplace_back(std::move(name), m);
  }
  return out;
}

Matrix lift_tokens(std::span<const double> raw, const EncoderWeights& weights,
                   const EncoderConfig& cfg) {
  if (raw.size() != cfg.raw_dim || weights.projection.rows() != cfg.raw_dim) {
    throw DimensionError("lift_tokens: raw feature length " + std::to_string(raw.size()) +
                         ", expected " + std::to_string(cfg.raw_dim));
  }
  const Matrix lifted = matmul(Matrix::row_vector(raw), weights.projection);
  return Matrix(cfg.tokens, cfg.dim,
                std::vector<double>(lifted.values().begin(), lifted.values().end()));
}

Matrix augmented_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                           const Matrix* prompt_key, const Matrix* prompt_value,
                           std::size_t n_heads, std::vector<Matrix>* probs_out) {
  if (!q.same_shape(k) || !q.same_shape(v)) {
    throw DimensionError("attention: Q " + q.shape_string() + ", K " + k.shape_string() + ", V " +
                         v.shape_string());
  }
  const std::size_t d = q.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  check_prompt_pair(prompt_key, prompt_value, d);
  const std::size_t p = prompt_key == nullptr ? 0 : prompt_key->rows();
  const std::size_t len = q.rows();
  const std::size_t span_len = p + len;
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(len, d);
  if (probs_out != nullptr) {
    probs_out->assign(n_heads, Matrix(len, span_len));
  }
  std::vector<double> logits(span_len);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < span_len; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          acc += q(i, c0 + c) * augmented(prompt_key, k, p, j, c0 + c);
        }
        logits[j] = acc * scale;
      }
      const auto weights = softmax(logits, 1.0);
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < span_len; ++j) {
          acc += weights[j] * augmented(prompt_value, v, p, j, c0 + c);
        }
        out(i, c0 + c) = acc;
      }
      if (probs_out != nullptr) {
        std::copy(weights.begin(), weights.end(), (*probs_out)[h].row(i).begin());
      }
    }
  }
  return out;
}

AttentionGradients augmented_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                                const Matrix* prompt_key,
                                                const Matrix* prompt_value,
                                                const std::vector<Matrix>& probs,
                                                const Matrix& d_out, std::size_t n_heads) {
  const std::size_t d = q.cols();
  const std::size_t len = q.rows();
  const std::size_t p = prompt_key == nullptr ? 0 : prompt_key->rows();
  const std::size_t span_len = p + len;
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (probs.size() != n_heads || !d_out.same_shape(q)) {
    throw DimensionError("attention backward: cached probabilities do not match inputs");
  }

  AttentionGradients g;
  g.q = Matrix(len, d);
  g.k = Matrix(len, d);
  g.v = Matrix(len, d);
  g.prompt_key = Matrix(p, d);
  g.prompt_value = Matrix(p, d);
  auto dk_at = [&](std::size_t j, std::size_t c) -> double& {
    return j < p ? g.prompt_key(j, c) : g.k(j - p, c);
  };
  auto dv_at = [&](std::size_t j, std::size_t c) -> double& {
    return j < p ? g.prompt_value(j, c) : g.v(j - p, c);
  };

  std::vector<double> d_probs(span_len);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * dh;
    const Matrix& a = probs[h];
    for (std::size_t i = 0; i < len; ++i) {
      double weighted = 0.0;
      for (std::size_t j = 0; j < span_len; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          acc += d_out(i, c0 + c) * augmented(prompt_value, v, p, j, c0 + c);
          dv_at(j, c0 + c) += a(i, j) * d_out(i, c0 + c);
        }
        d_probs[j] = acc;
        weighted += a(i, j) * acc;
      }
      for (std::size_t j = 0; j < span_len; ++j) {
        const double ds = a(i, j) * (d_probs[j] - weighted) * scale;
        for (std::size_t c = 0; c < dh; ++c) {
          g.q(i, c0 + c) += ds * augmented(prompt_key, k, p, j, c0 + c);
          dk_at(j, c0 + c) += ds * q(i, c0 + c);
        }
      }
    }
  }
  return g;
}

std::vector<double> encode(const EncoderWeights& weights, const EncoderConfig& cfg,
                           const Matrix& tokens, std::span<const PromptHalves> prompts,
                           ForwardCache* cache) {
  if (tokens.cols() != cfg.dim || tokens.rows() == 0) {
    throw DimensionError("encoder input " + tokens.shape_string() + " must be L x " +
                         std::to_string(cfg.dim));
  }
  if (!prompts.empty() && prompts.size() != cfg.n_layers) {
    throw ConfigError("prompt list must cover every encoder layer");
  }
  if (weights.layers.size() != cfg.n_layers) {
    throw ConfigError("encoder weights hold " + std::to_string(weights.layers.size()) +
                      " layers, config expects " + std::to_string(cfg.n_layers));
  }
  if (cache != nullptr) {
    cache->valid = false;
    cache->tokens = tokens;
    cache->layers.assign(cfg.n_layers, LayerCache{});
  }
  Matrix x = tokens;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = weights.layers[l];
    const PromptHalves halves = prompts.empty() ? PromptHalves{} : prompts[l];
    LayerCache local;
    LayerCache& lc = cache != nullptr ? cache->layers[l] : local;
    lc.input = x;
    lc.u = layer_norm(x, lw.ln1_gain, lw.ln1_bias, &lc.ln1);
    lc.q = affine(lc.u, lw.wq, lw.bq);
    lc.k = affine(lc.u, lw.wk, lw.bk);
    lc.v = affine(lc.u, lw.wv, lw.bv);
    lc.prompted = halves.key != nullptr;
    if (lc.prompted) {
      check_prompt_pair(halves.key, halves.value, cfg.dim);
      lc.prompt_key = *halves.key;
      lc.prompt_value = *halves.value;
    }
    lc.attn = augmented_attention(lc.q, lc.k, lc.v, halves.key, halves.value, cfg.n_heads,
                                  &lc.probs);
    lc.mid = x;
    add_scaled(lc.mid, affine(lc.attn, lw.wo, lw.bo));
    lc.m = layer_norm(lc.mid, lw.ln2_gain, lw.ln2_bias, &lc.ln2);
    lc.pre = affine(lc.m, lw.w1, lw.b1);
    lc.act = lc.pre;
    for (double& val : lc.act.values()) {
      val = gelu(val);
    }
    x = lc.mid;
    add_scaled(x, affine(lc.act, lw.w2, lw.b2));
  }
  Matrix final_out = x;
  if (cfg.n_layers > 0) {
    LayerNormCache local_ln;
    final_out = layer_norm(x, weights.final_gain, weights.final_bias,
                           cache != nullptr ? &cache->final_ln : &local_ln);
  }
  if (cache != nullptr) {
    cache->final_input = std::move(x);
    cache->valid = true;
  }
  auto pooled = column_mean(final_out);
  require_finite(pooled, "encoder output");
  return pooled;
}

EncoderOutput forward_uninstructed(const EncoderWeights& weights, const EncoderConfig& cfg,
                                   const Matrix& tokens, ForwardCache* cache) {
  EncoderOutput out;
  out.pooled = encode(weights, cfg, tokens, {}, cache);
  return out;
}

EncoderOutput forward_instructed(const EncoderWeights& weights, const EncoderConfig& cfg,
                                 const Matrix& tokens, const RoutingContext& routing,
                                 ForwardCache* cache, std::vector<ComposedPrompt>* composed_out) {
  const auto& injected = cfg.injected_layers;
  if (injected.empty()) {
    return forward_uninstructed(weights, cfg, tokens, cache);
  }
  if (routing.router == nullptr) {
    throw ConfigError("instructed forward needs a task router");
  }
  if (routing.pools.size() != injected.size()) {
    throw ConfigError("expected " + std::to_string(injected.size()) + " prompt pools, got " +
                      std::to_string(routing.pools.size()));
  }

  EncoderOutput out;
  std::vector<ComposedPrompt> composed;
  composed.reserve(injected.size());
  std::vector<PromptHalves> halves(cfg.n_layers);
  for (std::size_t slot = 0; slot < injected.size(); ++slot) {
    const PromptPool& pool = routing.pools[slot];
    if (pool.dim() != cfg.dim) {
      throw ConfigError("prompt pool width " + std::to_string(pool.dim()) + " does not match dim " +
                        std::to_string(cfg.dim));
    }
    auto raw = route_scores(tokens, *routing.router, slot);
    std::vector<double> penalized = raw;
    if (routing.apply_penalty && slot < routing.router->penalties.size()) {
      const auto& psi = routing.router->penalties[slot];
      if (psi.size() != raw.size()) {
        throw DimensionError("router penalty length does not match the pool");
      }
      for (std::size_t e = 0; e < raw.size(); ++e) {
        penalized[e] -= psi[e];
      }
    }
    std::vector<double> weighting = routing.weights_from_penalized ? penalized : raw;
    RoutingDecision decision;
    if (routing.fixed_selection != nullptr) {
      decision = make_decision_fixed(raw, weighting, routing.fixed_selection->at(slot));
      decision.penalized_scores = penalized;
    } else {
      auto selected = select_top_k(penalized, routing.top_k);
      decision = make_decision_fixed(raw, weighting, std::move(selected));
      decision.penalized_scores = std::move(penalized);
    }
    if (routing.record_activations && routing.ledger != nullptr) {
      routing.ledger->update(decision, slot);
    }
    composed.push_back(compose_prompt(pool, decision.selected, decision.weights));
    out.decisions.push_back(std::move(decision));
  }
  for (std::size_t slot = 0; slot < injected.size(); ++slot) {
    halves[injected[slot]] = PromptHalves{&composed[slot].key, &composed[slot].value};
  }
  out.pooled = encode(weights, cfg, tokens, halves, cache);
  if (composed_out != nullptr) {
    *composed_out = std::move(composed);
  }
  return out;
}

EncoderGradients encoder_backward(const EncoderWeights& weights, const EncoderConfig& cfg,
                                  const ForwardCache& cache, std::span<const double> d_pooled,
                                  GradTape* weight_grads) {
  if (!cache.valid) {
    throw StateError("encoder backward without a cached forward pass");
  }
  if (d_pooled.size() != cfg.dim) {
    throw DimensionError("encoder backward: upstream length " + std::to_string(d_pooled.size()));
  }
  const std::size_t len = cache.tokens.rows();
  EncoderGradients g;
  g.prompt_key.assign(cfg.n_layers, Matrix());
  g.prompt_value.assign(cfg.n_layers, Matrix());

  std::size_t lowest_needed = 0;
  if (weight_grads == nullptr) {
    lowest_needed = cfg.n_layers;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      if (cache.layers[l].prompted) {
        lowest_needed = l;
        break;
      }
    }
    if (lowest_needed == cfg.n_layers) {
      return g;
    }
  }

  Matrix dz(len, cfg.dim);
  for (std::size_t r = 0; r < len; ++r) {
    for (std::size_t c = 0; c < cfg.dim; ++c) {
      dz(r, c) = d_pooled[c] / static_cast<double>(len);
    }
  }
  Matrix dx;
  if (cfg.n_layers > 0) {
    Matrix d_gain(1, cfg.dim), d_bias(1, cfg.dim);
    dx = layer_norm_backward(dz, weights.final_gain, cache.final_ln, &d_gain, &d_bias);
    if (weight_grads != nullptr) {
      weight_grads->accumulate("encoder.final_gain", d_gain);
      weight_grads->accumulate("encoder.final_bias", d_bias);
    }
  } else {
    dx = std::move(dz);
  }

  for (std::size_t li = cfg.n_layers; li-- > lowest_needed;) {
    const LayerWeights& lw = weights.layers[li];
    const LayerCache& lc = cache.layers[li];
    const std::string p = "encoder.layer" + std::to_string(li) + ".";
    const bool want_weights = weight_grads != nullptr;

    // MLP branch.
    Matrix d_mid = dx;
    Matrix d_act = matmul_nt(dx, lw.w2);
    if (want_weights) {
      weight_grads->accumulate(p + "w2", matmul_tn(lc.act, dx));
      weight_grads->accumulate(p + "b2", column_sum(dx));
    }
    Matrix d_pre = d_act;
    for (std::size_t i = 0; i < d_pre.size(); ++i) {
      d_pre.values()[i] *= gelu_grad(lc.pre.values()[i]);
    }
    if (want_weights) {
      weight_grads->accumulate(p + "w1", matmul_tn(lc.m, d_pre));
      weight_grads->accumulate(p + "b1", column_sum(d_pre));
    }
    Matrix dm = matmul_nt(d_pre, lw.w1);
    Matrix g2(1, cfg.dim), b2(1, cfg.dim);
    add_scaled(d_mid, layer_norm_backward(dm, lw.ln2_gain, lc.ln2, &g2, &b2));
    if (want_weights) {
      weight_grads->accumulate(p + "ln2_gain", g2);
      weight_grads->accumulate(p + "ln2_bias", b2);
    }

    // Attention branch.
    Matrix d_attn = matmul_nt(d_mid, lw.wo);
    if (want_weights) {
      weight_grads->accumulate(p + "wo", matmul_tn(lc.attn, d_mid));
      weight_grads->accumulate(p + "bo", column_sum(d_mid));
    }
    const Matrix* pk = lc.prompted ? &lc.prompt_key : nullptr;
    const Matrix* pv = lc.prompted ? &lc.prompt_value : nullptr;
    AttentionGradients ag =
        augmented_attention_backward(lc.q, lc.k, lc.v, pk, pv, lc.probs, d_attn, cfg.n_heads);
    if (lc.prompted) {
      g.prompt_key[li] = std::move(ag.prompt_key);
      g.prompt_value[li] = std::move(ag.prompt_value);
    }
    if (want_weights) {
      weight_grads->accumulate(p + "wq", matmul_tn(lc.u, ag.q));
      weight_grads->accumulate(p + "bq", column_sum(ag.q));
      weight_grads->accumulate(p + "wk", matmul_tn(lc.u, ag.k));
      weight_grads->accumulate(p + "bk", column_sum(ag.k));
      weight_grads->accumulate(p + "wv", matmul_tn(lc.u, ag.v));
      weight_grads->accumulate(p + "bv", column_sum(ag.v));
    }
    if (!want_weights && li == lowest_needed) {
      break;
    }
    Matrix du = matmul_nt(ag.q, lw.wq);
    add_scaled(du, matmul_nt(ag.k, lw.wk));
    add_scaled(du, matmul_nt(ag.v, lw.wv));
    Matrix g1(1, cfg.dim), b1(1, cfg.dim);
    dx = d_mid;
    add_scaled(dx, layer_norm_backward(du, lw.ln1_gain, lc.ln1, &g1, &b1));
    if (want_weights) {
      weight_grads->accumulate(p + "ln1_gain", g1);
      weight_grads->accumulate(p + "ln1_bias", b1);
    }
  }
  if (weight_grads != nullptr) {
    g.tokens = std::move(dx);
  }
  return g;
}

std::string expert_param_name(std::size_t slot, std::size_t expert) {
  return "pool." + std::to_string(slot) + "." + std::to_string(expert);
}

std::string router_param_name(std::size_t task, std::size_t slot) {
  return "router." + std::to_string(task) + "." + std::to_string(slot);
}

void accumulate_prompt_gradients(const EncoderGradients& grads, const EncoderConfig& cfg,
                                 const Matrix& tokens, std::span<const RoutingDecision> decisions,
                                 std::span<const PromptPool> pools, std::size_t task,
                                 const HistoryLedger* ledger, const ModulatorConfig* modulator,
                                 GradTape& tape) {
  const auto& injected = cfg.injected_layers;
  if (decisions.size() != injected.size() || pools.size() != injected.size()) {
    throw DimensionError("prompt gradient accumulation: decisions/pools do not cover injected layers");
  }
  const bool hgm = modulator != nullptr && modulator->hgm_enabled && ledger != nullptr;
  for (std::size_t slot = 0; slot < injected.size(); ++slot) {
    const std::size_t layer = injected[slot];
    const PromptPool& pool = pools[slot];
    if (grads.prompt_key[layer].empty() && pool.prompt_length() > 0) {
      throw StateError("missing prompt gradient for injected layer " + std::to_string(layer + 1));
    }
    const Matrix upstream = pool.prompt_length() == 0
                                ? Matrix(0, cfg.dim)
                                : vstack(grads.prompt_key[layer], grads.prompt_value[layer]);
    PromptGradients pg = prompt_backward(upstream, decisions[slot], pool);
    std::vector<double> gamma;
    if (hgm) {
      gamma = hgm_factors(*ledger, slot, *modulator);
    }
    for (std::size_t i = 0; i < pg.experts.size(); ++i) {
      if (hgm && gamma[pg.experts[i]] != 1.0) {
        for (double& v : pg.grads[i].values()) {
          v *= gamma[pg.experts[i]];
        }
      }
      tape.accumulate(expert_param_name(slot, pg.experts[i]), pg.grads[i]);
    }
    tape.accumulate(router_param_name(task, slot), router_weight_gradient(tokens, pg.score_grads));
  }
}

}  // namespace hashcl
