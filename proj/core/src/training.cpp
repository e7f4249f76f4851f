#include "hashcl/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hashcl/errors.hpp"

namespace hashcl {

ClassPrototype fit_prototype(std::span<const std::vector<double>> features, std::size_t class_id,
                             FeatureSpace space) {
  if (features.empty()) {
    throw ArgumentError("cannot fit a prototype for class " + std::to_string(class_id) +
                        " from zero features");
  }
  const std::size_t d = features.front().size();
  ClassPrototype proto;
  proto.class_id = class_id;
  proto.space = space;
  proto.mean.assign(d, 0.0);
  proto.variance.assign(d, 0.0);
  for (const auto& f : features) {
    if (f.size() != d) {
      throw DimensionError("prototype features differ in length");
    }
    for (std::size_t i = 0; i < d; ++i) proto.mean[i] += f[i];
  }
  const double n = static_cast<double>(features.size());
  for (double& m : proto.mean) m /= n;
  for (const auto& f : features) {
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = f[i] - proto.mean[i];
      proto.variance[i] += diff * diff;
    }
  }
  for (double& v : proto.variance) {
    v = std::max(v / n, kPrototypeVarianceFloor);
  }
  return proto;
}

std::vector<std::vector<double>> sample_pseudo_features(const ClassPrototype& proto,
                                                        std::size_t count, Rng& rng) {
  std::vector<std::vector<double>> out(count, std::vector<double>(proto.mean.size()));
  for (auto& f : out) {
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = proto.mean[i] + std::sqrt(proto.variance[i]) * rng.normal();
    }
  }
  return out;
}

void PrototypeAccumulator::add(std::span<const double> feature) {
  if (count_ == 0) {
    mean_.assign(feature.size(), 0.0);
    m2_.assign(feature.size(), 0.0);
  } else if (feature.size() != mean_.size()) {
    throw DimensionError("prototype accumulator: feature length changed");
  }
  ++count_;
  const double n = static_cast<double>(count_);
  for (std::size_t i = 0; i < feature.size(); ++i) {
    const double delta = feature[i] - mean_[i];
    mean_[i] += delta / n;
    m2_[i] += delta * (feature[i] - mean_[i]);
  }
}

ClassPrototype PrototypeAccumulator::finish(std::size_t class_id, FeatureSpace space) const {
  if (count_ == 0) {
    throw ArgumentError("cannot fit a prototype for class " + std::to_string(class_id) +
                        " from zero features");
  }
  ClassPrototype proto;
  proto.class_id = class_id;
  proto.space = space;
  proto.mean = mean_;
  proto.variance.resize(m2_.size());
  for (std::size_t i = 0; i < m2_.size(); ++i) {
    proto.variance[i] = std::max(m2_[i] / static_cast<double>(count_), kPrototypeVarianceFloor);
  }
  return proto;
}

namespace {

Matrix grow_columns(const Matrix& m, std::size_t rows, std::size_t extra) {
  Matrix out(rows, m.cols() + extra);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      out(r, c) = m(r, c);
    }
  }
  return out;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

void Heads::add_classes(std::size_t count, std::size_t dim) {
  classifier_w = grow_columns(classifier_w, dim, count);
  classifier_b = grow_columns(classifier_b, 1, count);
}

void Heads::add_task(std::size_t dim) {
  task_w = grow_columns(task_w, dim, 1);
  task_b = grow_columns(task_b, 1, 1);
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (cr_sign != 1.0 && cr_sign != -1.0) throw ConfigError("cr_sign must be +1 or -1");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (pseudo_per_class == 0) throw ConfigError("pseudo_per_class must be >= 1");
  for (double lr : {lr_prompt, lr_router, lr_classifier, lr_task_head}) {
    if (!(lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
  }
}

void PoolConfig::validate() const {
  if (num_experts == 0) throw ConfigError("num_experts must be >= 1");
  if (top_k == 0) throw ConfigError("top_k must be >= 1");
  if (top_k > num_experts) {
    throw ConfigError("top_k " + std::to_string(top_k) + " exceeds n_experts " +
                      std::to_string(num_experts));
  }
  if (prompt_length % 2 != 0) {
    throw ConfigError("prompt_length " + std::to_string(prompt_length) +
                      " must be even to split into key and value halves");
  }
}

CrResult cr_loss(std::span<const std::vector<double>> features,
                 std::span<const std::vector<double>> prior_means, double tau, double sign,
                 bool want_grads) {
  if (!(tau > 0.0)) {
    throw ArgumentError("cr_loss temperature must be positive");
  }
  CrResult result;
  const std::size_t n = features.size();
  const std::size_t c = prior_means.size();
  const std::size_t d = n == 0 ? 0 : features.front().size();
  if (want_grads) {
    result.grads.assign(n, std::vector<double>(d, 0.0));
  }
  if (c == 0 || n == 0) {
    return result;
  }
  const double cd = static_cast<double>(c);
  std::vector<double> logits(n + c);
  // pair_probs(i, j) = exp(h_i.h_j / tau) / Z(h_i)
  Matrix pair_probs(n, n);
  Matrix proto_probs(n, c);
  double value = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) logits[j] = dot(features[i], features[j]) / tau;
    double positives = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      logits[n + k] = dot(features[i], prior_means[k]) / tau;
      positives += logits[n + k];
    }
    const double log_z = log_sum_exp(logits);
    value += positives - cd * log_z;
    if (want_grads) {
      for (std::size_t j = 0; j < n; ++j) pair_probs(i, j) = std::exp(logits[j] - log_z);
      for (std::size_t k = 0; k < c; ++k) proto_probs(i, k) = std::exp(logits[n + k] - log_z);
    }
  }
  result.value = sign * value;
  if (!want_grads) {
    return result;
  }
  std::vector<double> mean_sum(d, 0.0);
  for (const auto& mu : prior_means) {
    for (std::size_t t = 0; t < d; ++t) mean_sum[t] += mu[t];
  }
  for (std::size_t k = 0; k < n; ++k) {
    auto& g = result.grads[k];
    for (std::size_t t = 0; t < d; ++t) {
      double expected = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        expected += (pair_probs(k, j) + pair_probs(j, k)) * features[j][t];
      }
      for (std::size_t m = 0; m < c; ++m) {
        expected += proto_probs(k, m) * prior_means[m][t];
      }
      g[t] = sign * (mean_sum[t] - cd * expected) / tau;
    }
  }
  return result;
}

double head_cross_entropy(const Matrix& w, const Matrix& b, std::span<const PseudoSample> batch,
                          Matrix* grad_w, Matrix* grad_b) {
  if (batch.empty()) {
    return 0.0;
  }
  const std::size_t classes = w.cols();
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::vector<double> logits(classes);
  for (const auto& s : batch) {
    if (s.feature.size() != w.rows()) {
      throw DimensionError("head input length " + std::to_string(s.feature.size()) +
                           " does not match head " + w.shape_string());
    }
    if (s.target >= classes) {
      throw DataError("head target " + std::to_string(s.target) + " outside " +
                      std::to_string(classes) + " outputs");
    }
    for (std::size_t j = 0; j < classes; ++j) {
      double z = b(0, j);
      for (std::size_t i = 0; i < w.rows(); ++i) z += s.feature[i] * w(i, j);
      logits[j] = z;
    }
    const double lse = log_sum_exp(logits);
    loss += (lse - logits[s.target]) * inv;
    if (grad_w != nullptr) {
      for (std::size_t j = 0; j < classes; ++j) {
        const double dz = (std::exp(logits[j] - lse) - (j == s.target ? 1.0 : 0.0)) * inv;
        (*grad_b)(0, j) += dz;
        for (std::size_t i = 0; i < w.rows(); ++i) (*grad_w)(i, j) += s.feature[i] * dz;
      }
    }
  }
  return loss;
}

std::size_t LearnerState::column_of(std::size_t class_id) const {
  auto it = std::find(class_order.begin(), class_order.end(), class_id);
  if (it == class_order.end()) {
    throw DataError("class " + std::to_string(class_id) + " has not been seen");
  }
  return static_cast<std::size_t>(it - class_order.begin());
}

ContinualLearner::ContinualLearner(EncoderConfig encoder,
                                   std::shared_ptr<const EncoderWeights> backbone,
                                   PoolConfig pool, ModulatorConfig modulator, TrainConfig train,
                                   std::uint64_t seed)
    : pool_(pool),
      modulator_(modulator),
      train_(train),
      rng_(Rng(seed).split("learner")),
      prompt_opt_(train.optimizer),
      head_opt_(train.optimizer),
      task_opt_(train.optimizer),
      tap_opt_(train.optimizer) {
  encoder.validate();
  pool_.validate();
  modulator_.validate();
  train_.validate();
  if (!backbone) {
    throw ConfigError("continual learner needs a pretrained backbone");
  }
  state_.encoder = std::move(encoder);
  state_.backbone = std::move(backbone);
  Rng init = rng_.split("pools");
  for (std::size_t slot = 0; slot < state_.encoder.injected_layers.size(); ++slot) {
    PromptPool p(state_.encoder.injected_layers[slot], pool_.num_experts, pool_.prompt_length,
                 state_.encoder.dim);
    p.init_uniform(init, pool_.prompt_init_scale);
    state_.pools.push_back(std::move(p));
  }
  state_.ledger =
      HistoryLedger(state_.encoder.injected_layers.size(), pool_.num_experts, pool_.top_k);
  state_.heads.add_classes(0, state_.encoder.dim);
  state_.heads.task_w = Matrix(state_.encoder.dim, 0);
  state_.heads.task_b = Matrix(1, 0);
}

std::size_t ContinualLearner::active_task() const {
  if (!task_open_) {
    throw StateError("no task is being trained");
  }
  return state_.tasks_trained;
}

RoutingContext ContinualLearner::routing_for(std::size_t task, bool training) const {
  RoutingContext ctx;
  ctx.router = &state_.routers.at(task);
  ctx.pools = state_.pools;
  ctx.top_k = pool_.top_k;
  ctx.apply_penalty = training || modulator_.hdr_at_inference;
  ctx.weights_from_penalized = pool_.weights_from_penalized;
  return ctx;
}

std::vector<double> ContinualLearner::uninstructed_features(std::span<const double> raw) const {
  const Matrix tokens = lift_tokens(raw, *state_.backbone, state_.encoder);
  return forward_uninstructed(*state_.backbone, state_.encoder, tokens).pooled;
}

EncoderOutput ContinualLearner::instructed_features(std::span<const double> raw, std::size_t task,
                                                    bool training_routing) const {
  const Matrix tokens = lift_tokens(raw, *state_.backbone, state_.encoder);
  return forward_instructed(*state_.backbone, state_.encoder, tokens,
                            routing_for(task, training_routing));
}

void ContinualLearner::begin_task(const TaskData& task) {
  if (task_open_) {
    throw StateError("task " + std::to_string(state_.tasks_trained) + " is still open");
  }
  if (task.task != state_.tasks_trained) {
    throw StateError("tasks must arrive in order: expected task " +
                     std::to_string(state_.tasks_trained) + ", got " + std::to_string(task.task));
  }
  if (task.classes.empty() || task.train.empty()) {
    throw DataError("task " + std::to_string(task.task) + " has no classes or no training data");
  }
  for (std::size_t c : task.classes) {
    if (state_.class_task.count(c) != 0) {
      throw DataError("class " + std::to_string(c) + " already belongs to task " +
                      std::to_string(state_.class_task.at(c)));
    }
  }
  const std::size_t t = task.task;
  const std::size_t d = state_.encoder.dim;
  state_.heads.add_classes(task.classes.size(), d);
  state_.heads.add_task(d);
  for (std::size_t c : task.classes) {
    state_.class_order.push_back(c);
    state_.class_task[c] = t;
  }

  TaskRouter router;
  router.task = t;
  if (t == 0 || !pool_.inherit_router) {
    Rng init = rng_.split("router").split(t);
    for (std::size_t slot = 0; slot < state_.pools.size(); ++slot) {
      router.weights.push_back(init.normal_matrix(d, pool_.num_experts, pool_.router_init_std));
    }
  } else {
    router.weights = state_.routers.back().weights;
  }

  // Uninstructed prototypes come from the frozen backbone alone.
  std::map<std::size_t, std::vector<std::vector<double>>> by_class;
  for (const auto& s : task.train) {
    if (state_.class_task.count(s.label) == 0 || state_.class_task.at(s.label) != t) {
      throw DataError("training label " + std::to_string(s.label) + " is not a class of task " +
                      std::to_string(t));
    }
    by_class[s.label].push_back(uninstructed_features(s.raw));
  }
  for (std::size_t c : task.classes) {
    auto it = by_class.find(c);
    if (it == by_class.end()) {
      throw DataError("class " + std::to_string(c) + " has no training samples");
    }
    state_.uninstructed[c] = fit_prototype(it->second, c, FeatureSpace::uninstructed);
  }

  state_.ledger.freeze_protected_set(t);
  if (modulator_.hdr_enabled) {
    for (std::size_t slot = 0; slot < state_.pools.size(); ++slot) {
      router.penalties.push_back(history_penalties(state_.ledger, slot, modulator_));
    }
  }
  state_.routers.push_back(std::move(router));
  provisional_.clear();
  task_open_ = true;
}

void ContinualLearner::finish_task(const TaskData& task) {
  const std::size_t t = active_task();
  std::map<std::size_t, std::vector<std::vector<double>>> by_class;
  for (const auto& s : task.train) {
    by_class[s.label].push_back(instructed_features(s.raw, t, false).pooled);
  }
  for (std::size_t c : task.classes) {
    state_.instructed[c] = fit_prototype(by_class.at(c), c, FeatureSpace::instructed);
  }
  provisional_.clear();
  ++state_.tasks_trained;
  task_open_ = false;
}

WtpEvaluation ContinualLearner::evaluate_wtp(std::span<const LabeledSample> batch, GradTape* tape,
                                             const SelectionOverride* fixed,
                                             HistoryLedger* record_into) const {
  const std::size_t t = active_task();
  const std::size_t d = state_.encoder.dim;
  const std::size_t n = batch.size();
  if (n == 0) {
    throw ArgumentError("empty WTP batch");
  }
  if (fixed != nullptr && fixed->size() != n) {
    throw ArgumentError("selection override must cover every sample");
  }
  // Columns of the current task's classes.
  std::vector<std::size_t> cols;
  for (std::size_t col = 0; col < state_.class_order.size(); ++col) {
    if (state_.class_task.at(state_.class_order[col]) == t) cols.push_back(col);
  }
  const Matrix& w = state_.heads.classifier_w;
  const Matrix& b = state_.heads.classifier_b;

  WtpEvaluation eval;
  std::vector<ForwardCache> caches(tape != nullptr ? n : 0);
  std::vector<Matrix> tokens(n);
  std::vector<std::vector<double>> d_features(n, std::vector<double>(d, 0.0));
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix grad_w, grad_b;
  if (tape != nullptr) {
    grad_w = Matrix(w.rows(), w.cols());
    grad_b = Matrix(1, b.cols());
  }

  double ce = 0.0;
  std::vector<double> logits(cols.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = batch[i];
    auto label_it = state_.class_task.find(s.label);
    if (label_it == state_.class_task.end() || label_it->second != t) {
      throw DataError("label " + std::to_string(s.label) + " is outside the classes of task " +
                      std::to_string(t));
    }
    tokens[i] = lift_tokens(s.raw, *state_.backbone, state_.encoder);
    RoutingContext ctx = routing_for(t, true);
    if (fixed != nullptr) ctx.fixed_selection = &(*fixed)[i];
    ctx.ledger = record_into;
    ctx.record_activations = record_into != nullptr;
    EncoderOutput out = forward_instructed(*state_.backbone, state_.encoder, tokens[i], ctx,
                                           tape != nullptr ? &caches[i] : nullptr);
    std::size_t target = 0;
    for (std::size_t j = 0; j < cols.size(); ++j) {
      double z = b(0, cols[j]);
      for (std::size_t r = 0; r < d; ++r) z += out.pooled[r] * w(r, cols[j]);
      logits[j] = z;
      if (state_.class_order[cols[j]] == s.label) target = j;
    }
    const double lse = log_sum_exp(logits);
    ce += (lse - logits[target]) * inv_n;
    if (tape != nullptr) {
      for (std::size_t j = 0; j < cols.size(); ++j) {
        const double dz = (std::exp(logits[j] - lse) - (j == target ? 1.0 : 0.0)) * inv_n;
        grad_b(0, cols[j]) += dz;
        for (std::size_t r = 0; r < d; ++r) {
          grad_w(r, cols[j]) += out.pooled[r] * dz;
          d_features[i][r] += w(r, cols[j]) * dz;
        }
      }
    }
    eval.features.push_back(std::move(out.pooled));
    eval.decisions.push_back(std::move(out.decisions));
  }

  double cr = 0.0;
  if (train_.lambda > 0.0 && t > 0) {
    std::vector<std::vector<double>> prior_means;
    for (const auto& [c, proto] : state_.instructed) {
      if (state_.class_task.at(c) < t) prior_means.push_back(proto.mean);
    }
    CrResult r = cr_loss(eval.features, prior_means, train_.tau, train_.cr_sign, tape != nullptr);
    cr = r.value * inv_n;
    if (tape != nullptr) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
          d_features[i][k] += train_.lambda * r.grads[i][k] * inv_n;
        }
      }
    }
  }
  eval.loss.ce = ce;
  eval.loss.cr = cr;
  eval.loss.total = ce + train_.lambda * cr;

  if (tape != nullptr) {
    tape->accumulate("classifier.w", grad_w);
    tape->accumulate("classifier.b", grad_b);
    for (std::size_t i = 0; i < n; ++i) {
      EncoderGradients eg =
          encoder_backward(*state_.backbone, state_.encoder, caches[i], d_features[i], nullptr);
      accumulate_prompt_gradients(eg, state_.encoder, tokens[i], eval.decisions[i], state_.pools,
                                  t, nullptr, nullptr, *tape);
    }
  }
  return eval;
}

void ContinualLearner::apply_wtp_gradients(const GradTape& tape) {
  const std::size_t t = active_task();
  for (std::size_t slot = 0; slot < state_.pools.size(); ++slot) {
    const auto gamma = modulator_.hgm_enabled ? hgm_factors(state_.ledger, slot, modulator_)
                                              : std::vector<double>(pool_.num_experts, 1.0);
    PromptPool& pool = state_.pools[slot];
    for (std::size_t e = 0; e < pool.num_experts(); ++e) {
      const std::string name = expert_param_name(slot, e);
      if (!tape.contains(name)) continue;
      Matrix g = tape.at(name);
      if (gamma[e] != 1.0) {
        for (double& v : g.values()) v *= gamma[e];
      }
      prompt_opt_.step(name, pool.prompt(e), g, train_.lr_prompt);
    }
    const std::string rname = router_param_name(t, slot);
    if (tape.contains(rname)) {
      prompt_opt_.step(rname, state_.routers[t].weights[slot], tape.at(rname), train_.lr_router);
    }
  }
  head_opt_.step("classifier.w", state_.heads.classifier_w, tape.at("classifier.w"),
                 train_.lr_classifier);
  head_opt_.step("classifier.b", state_.heads.classifier_b, tape.at("classifier.b"),
                 train_.lr_classifier);
}

WtpBreakdown ContinualLearner::wtp_step(std::span<const LabeledSample> batch) {
  GradTape tape;
  WtpEvaluation eval = evaluate_wtp(batch, &tape, nullptr, &state_.ledger);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    provisional_[batch[i].label].add(eval.features[i]);
  }
  apply_wtp_gradients(tape);
  return eval.loss;
}

std::vector<PseudoSample> ContinualLearner::draw_tii_set(Rng& rng) const {
  std::vector<PseudoSample> out;
  for (const auto& [c, proto] : state_.uninstructed) {
    for (auto& f : sample_pseudo_features(proto, train_.pseudo_per_class, rng)) {
      out.push_back({std::move(f), state_.class_task.at(c)});
    }
  }
  return out;
}

std::vector<PseudoSample> ContinualLearner::draw_tap_set(
    Rng& rng, const std::map<std::size_t, ClassPrototype>* provisional) const {
  std::vector<PseudoSample> out;
  for (std::size_t col = 0; col < state_.class_order.size(); ++col) {
    const std::size_t c = state_.class_order[col];
    const ClassPrototype* proto = nullptr;
    if (auto it = state_.instructed.find(c); it != state_.instructed.end()) {
      proto = &it->second;
    } else if (provisional != nullptr) {
      if (auto pit = provisional->find(c); pit != provisional->end()) proto = &pit->second;
    }
    if (proto == nullptr) {
      throw StateError("no instructed prototype for class " + std::to_string(c));
    }
    for (auto& f : sample_pseudo_features(*proto, train_.pseudo_per_class, rng)) {
      out.push_back({std::move(f), col});
    }
  }
  return out;
}

double ContinualLearner::tii_step(std::span<const PseudoSample> batch) {
  Heads& h = state_.heads;
  Matrix gw(h.task_w.rows(), h.task_w.cols()), gb(1, h.task_b.cols());
  const double loss = head_cross_entropy(h.task_w, h.task_b, batch, &gw, &gb);
  task_opt_.step("task.w", h.task_w, gw, train_.lr_task_head);
  task_opt_.step("task.b", h.task_b, gb, train_.lr_task_head);
  return loss;
}

double ContinualLearner::tap_step(std::span<const PseudoSample> batch) {
  Heads& h = state_.heads;
  Matrix gw(h.classifier_w.rows(), h.classifier_w.cols()), gb(1, h.classifier_b.cols());
  const double loss = head_cross_entropy(h.classifier_w, h.classifier_b, batch, &gw, &gb);
  tap_opt_.step("classifier.w", h.classifier_w, gw, train_.lr_classifier);
  tap_opt_.step("classifier.b", h.classifier_b, gb, train_.lr_classifier);
  return loss;
}

TaskReport ContinualLearner::train_task(const TaskData& task,
                                        const std::function<void(const EpochRecord&)>& on_epoch) {
  begin_task(task);
  const std::size_t t = task.task;
  const std::size_t bs = train_.batch_size;
  Rng task_rng = rng_.split("train").split(t);
  TaskReport report;

  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < train_.epochs; ++epoch) {
    Rng epoch_rng = task_rng.split(epoch);
    EpochRecord rec;
    rec.task = t;
    rec.epoch = epoch;

    provisional_.clear();
    epoch_rng.shuffle(order);
    std::size_t batches = 0;
    std::vector<LabeledSample> batch;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      batch.clear();
      for (std::size_t i = start; i < std::min(start + bs, order.size()); ++i) {
        batch.push_back(task.train[order[i]]);
      }
      const WtpBreakdown l = wtp_step(batch);
      rec.wtp.ce += l.ce;
      rec.wtp.cr += l.cr;
      rec.wtp.total += l.total;
      ++batches;
    }
    rec.wtp.ce /= static_cast<double>(batches);
    rec.wtp.cr /= static_cast<double>(batches);
    rec.wtp.total /= static_cast<double>(batches);

    auto run_head_stage = [&](std::vector<PseudoSample> set, auto&& step) {
      epoch_rng.shuffle(set);
      double total = 0.0;
      std::size_t count = 0;
      for (std::size_t start = 0; start < set.size(); start += bs) {
        const std::size_t end = std::min(start + bs, set.size());
        total += step(std::span<const PseudoSample>(set.data() + start, end - start));
        ++count;
      }
      return count == 0 ? 0.0 : total / static_cast<double>(count);
    };

    Rng tii_rng = epoch_rng.split("tii");
    rec.tii = run_head_stage(draw_tii_set(tii_rng),
                             [&](std::span<const PseudoSample> b) { return tii_step(b); });

    std::map<std::size_t, ClassPrototype> provisional;
    for (const auto& [c, acc] : provisional_) {
      provisional[c] = acc.finish(c, FeatureSpace::instructed);
    }
    Rng tap_rng = epoch_rng.split("tap");
    rec.tap = run_head_stage(draw_tap_set(tap_rng, &provisional),
                             [&](std::span<const PseudoSample> b) { return tap_step(b); });

    if (on_epoch) on_epoch(rec);
    report.epochs.push_back(rec);
  }
  finish_task(task);
  return report;
}

std::size_t ContinualLearner::predict_task(std::span<const double> raw) const {
  if (state_.heads.num_tasks() == 0) {
    throw StateError("no task has been trained");
  }
  const auto f = uninstructed_features(raw);
  const Heads& h = state_.heads;
  std::vector<double> logits(h.num_tasks());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    double z = h.task_b(0, j);
    for (std::size_t i = 0; i < f.size(); ++i) z += f[i] * h.task_w(i, j);
    logits[j] = z;
  }
  return argmax(logits);
}

std::size_t ContinualLearner::predict_class(std::span<const double> raw, std::size_t task) const {
  const auto out = instructed_features(raw, task, false);
  const Heads& h = state_.heads;
  std::vector<double> logits(h.num_classes());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    double z = h.classifier_b(0, j);
    for (std::size_t i = 0; i < out.pooled.size(); ++i) z += out.pooled[i] * h.classifier_w(i, j);
    logits[j] = z;
  }
  return state_.class_order.at(argmax(logits));
}

std::size_t ContinualLearner::infer(std::span<const double> raw) const {
  if (state_.tasks_trained == 0 && !task_open_) {
    throw StateError("inference before any task was trained");
  }
  return predict_class(raw, predict_task(raw));
}

}  // namespace hashcl
