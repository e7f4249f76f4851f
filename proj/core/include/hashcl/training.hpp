#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "hashcl/dataset.hpp"
#include "hashcl/encoder.hpp"
#include "hashcl/grad.hpp"
#include "hashcl/history.hpp"
#include "hashcl/optim.hpp"
#include "hashcl/prompt_moe.hpp"
#include "hashcl/rng.hpp"

namespace hashcl {

enum class FeatureSpace { instructed, uninstructed };

inline constexpr double kPrototypeVarianceFloor = 1e-6;

/// Diagonal Gaussian summary of one class in one feature space.
struct ClassPrototype {
  std::size_t class_id = 0;
  std::vector<double> mean;
  std::vector<double> variance;
  FeatureSpace space = FeatureSpace::uninstructed;
};

/// Mean and population variance (floored at kPrototypeVarianceFloor).
ClassPrototype fit_prototype(std::span<const std::vector<double>> features, std::size_t class_id,
                             FeatureSpace space);

std::vector<std::vector<double>> sample_pseudo_features(const ClassPrototype& proto,
                                                        std::size_t count, Rng& rng);

/// Streaming (Welford) mean and variance, for prototypes fitted on the fly.
class PrototypeAccumulator {
 public:
  void add(std::span<const double> feature);
  std::size_t count() const noexcept { return count_; }
  ClassPrototype finish(std::size_t class_id, FeatureSpace space) const;

 private:
  std::size_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// Linear classifier over all seen classes and linear task-identity predictor.
struct Heads {
  Matrix classifier_w;  // d x classes
  Matrix classifier_b;  // 1 x classes
  Matrix task_w;        // d x tasks
  Matrix task_b;        // 1 x tasks

  std::size_t num_classes() const noexcept { return classifier_b.cols(); }
  std::size_t num_tasks() const noexcept { return task_b.cols(); }
  void add_classes(std::size_t count, std::size_t dim);
  void add_task(std::size_t dim);
};

struct TrainConfig {
  double lambda = 0.1;  // contrastive regularization weight
  double tau = 0.8;
  double cr_sign = 1.0;  // +1 keeps the printed form of the CR term
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double lr_prompt = 0.5;
  double lr_router = 0.1;
  double lr_classifier = 0.5;
  double lr_task_head = 0.5;
  std::size_t pseudo_per_class = 64;
  OptimizerKind optimizer = OptimizerKind::sgd;

  void validate() const;
};

struct PoolConfig {
  std::size_t num_experts = 15;
  std::size_t prompt_length = 16;
  std::size_t top_k = 2;
  double prompt_init_scale = 1.0;
  double router_init_std = 1.0;
  // When set, a new task's router starts from the previous task's router.
  bool inherit_router = false;
  bool weights_from_penalized = true;

  void validate() const;
};

struct WtpBreakdown {
  double ce = 0.0;
  double cr = 0.0;  // batch mean of the per-feature CR terms
  double total = 0.0;
};

struct CrResult {
  double value = 0.0;  // the printed sum over batch features and prior classes
  std::vector<std::vector<double>> grads;  // d value / d h, per batch feature
};

/// Contrastive regularizer of current-task features against prior class means.
CrResult cr_loss(std::span<const std::vector<double>> features,
                 std::span<const std::vector<double>> prior_means, double tau, double sign = 1.0,
                 bool want_grads = false);

struct PseudoSample {
  std::vector<double> feature;
  std::size_t target = 0;
};

/// Mean softmax cross-entropy of an affine head; fills head gradients when asked.
double head_cross_entropy(const Matrix& w, const Matrix& b, std::span<const PseudoSample> batch,
                          Matrix* grad_w, Matrix* grad_b);

struct EpochRecord {
  std::size_t task = 0;
  std::size_t epoch = 0;
  WtpBreakdown wtp;
  double tii = 0.0;
  double tap = 0.0;
};

struct TaskReport {
  std::vector<EpochRecord> epochs;
};

/// Everything that persists between tasks. No raw samples are kept.
struct LearnerState {
  EncoderConfig encoder;
  std::shared_ptr<const EncoderWeights> backbone;
  std::vector<PromptPool> pools;  // one per injected layer
  std::vector<TaskRouter> routers;
  HistoryLedger ledger;
  Heads heads;
  std::vector<std::size_t> class_order;          // classifier column -> class id
  std::map<std::size_t, std::size_t> class_task;  // class id -> task
  std::map<std::size_t, ClassPrototype> instructed;
  std::map<std::size_t, ClassPrototype> uninstructed;
  std::size_t tasks_trained = 0;

  std::size_t column_of(std::size_t class_id) const;
};

using SelectionOverride = std::vector<std::vector<std::vector<std::size_t>>>;  // sample x layer

struct WtpEvaluation {
  WtpBreakdown loss;
  std::vector<std::vector<double>> features;
  std::vector<std::vector<RoutingDecision>> decisions;
};

class ContinualLearner {
 public:
  ContinualLearner(EncoderConfig encoder, std::shared_ptr<const EncoderWeights> backbone,
                   PoolConfig pool, ModulatorConfig modulator, TrainConfig train,
                   std::uint64_t seed);

  const LearnerState& state() const noexcept { return state_; }
  LearnerState& mutable_state() noexcept { return state_; }
  const PoolConfig& pool_config() const noexcept { return pool_; }
  const ModulatorConfig& modulator() const noexcept { return modulator_; }
  const TrainConfig& train_config() const noexcept { return train_; }

  /// Runs the full per-task pipeline: uninstructed prototypes, protected-set
  /// freeze, E epochs of WTP / TII / TAP, then instructed prototypes.
  TaskReport train_task(const TaskData& task,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

  // Task setup without training (heads, router, uninstructed prototypes, freeze).
  void begin_task(const TaskData& task);
  void finish_task(const TaskData& task);

  /// One optimizer step on prompts, the active router and the current
  /// classifier columns. Updates the ledger.
  WtpBreakdown wtp_step(std::span<const LabeledSample> batch);
  /// WTP loss for the active task without updating anything. Gradients go to
  /// `tape` when given ("pool.*", "router.*", "classifier.w", "classifier.b").
  WtpEvaluation evaluate_wtp(std::span<const LabeledSample> batch, GradTape* tape,
                             const SelectionOverride* fixed = nullptr,
                             HistoryLedger* record_into = nullptr) const;

  std::vector<PseudoSample> draw_tii_set(Rng& rng) const;
  std::vector<PseudoSample> draw_tap_set(
      Rng& rng, const std::map<std::size_t, ClassPrototype>* provisional = nullptr) const;
  double tii_step(std::span<const PseudoSample> batch);
  double tap_step(std::span<const PseudoSample> batch);

  std::vector<double> uninstructed_features(std::span<const double> raw) const;
  EncoderOutput instructed_features(std::span<const double> raw, std::size_t task,
                                    bool training_routing) const;

  std::size_t predict_task(std::span<const double> raw) const;
  std::size_t predict_class(std::span<const double> raw, std::size_t task) const;
  /// Two-pass inference: task identity, then instructed classification.
  std::size_t infer(std::span<const double> raw) const;

  std::size_t active_task() const;

 private:
  RoutingContext routing_for(std::size_t task, bool training) const;
  void apply_wtp_gradients(const GradTape& tape);

  LearnerState state_;
  PoolConfig pool_;
  ModulatorConfig modulator_;
  TrainConfig train_;
  Rng rng_;
  Optimizer prompt_opt_;
  Optimizer head_opt_;
  Optimizer task_opt_;
  Optimizer tap_opt_;
  bool task_open_ = false;
  // Instructed statistics of the current task's classes, gathered during WTP
  // and used as TAP prototypes until the final ones are fitted.
  std::map<std::size_t, PrototypeAccumulator> provisional_;
};

}  // namespace hashcl
