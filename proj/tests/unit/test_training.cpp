#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "hashcl/errors.hpp"
#include "hashcl/synth.hpp"
#include "hashcl/training.hpp"

using namespace hashcl;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.dim = 8;
  cfg.n_heads = 2;
  cfg.tokens = 3;
  cfg.raw_dim = 6;
  cfg.injected_layers = {0, 1};
  return cfg;
}

PoolConfig tiny_pool() {
  PoolConfig pool;
  pool.num_experts = 4;
  pool.prompt_length = 4;
  pool.top_k = 2;
  return pool;
}

DataConfig tiny_data(std::size_t tasks) {
  DataConfig data;
  data.tasks = tasks;
  data.classes_per_task = 2;
  data.train_per_class = 12;
  data.test_per_class = 6;
  return data;
}

struct Scenario {
  EncoderConfig enc = tiny_encoder();
  std::shared_ptr<const EncoderWeights> backbone;
  Stream stream;

  explicit Scenario(std::size_t tasks = 2, std::uint64_t seed = 3) {
    Rng rng(seed);
    backbone = std::make_shared<const EncoderWeights>(EncoderWeights::init(enc, rng));
    stream = generate_stream(tiny_data(tasks), enc.raw_dim, seed);
  }

  ContinualLearner learner(TrainConfig train = {}, ModulatorConfig mod = {}) const {
    train.epochs = 1;
    train.pseudo_per_class = 8;
    return ContinualLearner(enc, backbone, tiny_pool(), mod, train, 7);
  }
};

}  // namespace

TEST(Prototype, HandArithmetic) {
  const std::vector<std::vector<double>> f{{0.0}, {2.0}};
  const auto p = fit_prototype(f, 3, FeatureSpace::instructed);
  EXPECT_EQ(p.class_id, 3u);
  EXPECT_EQ(p.mean, std::vector<double>{1.0});
  EXPECT_EQ(p.variance, std::vector<double>{1.0});
}

TEST(Prototype, DegenerateSetsUseTheFloor) {
  const std::vector<std::vector<double>> same{{1.5, -2.0}, {1.5, -2.0}};
  const auto p = fit_prototype(same, 0, FeatureSpace::uninstructed);
  EXPECT_EQ(p.mean, (std::vector<double>{1.5, -2.0}));
  EXPECT_EQ(p.variance, (std::vector<double>{kPrototypeVarianceFloor, kPrototypeVarianceFloor}));
  const std::vector<std::vector<double>> one{{4.0}};
  const auto q = fit_prototype(one, 0, FeatureSpace::uninstructed);
  EXPECT_EQ(q.mean, std::vector<double>{4.0});
  EXPECT_EQ(q.variance, std::vector<double>{kPrototypeVarianceFloor});
}

TEST(Prototype, EmptySetIsAnArgumentError) {
  EXPECT_THROW(fit_prototype(std::vector<std::vector<double>>{}, 0, FeatureSpace::instructed),
               ArgumentError);
}

TEST(Prototype, AccumulatorMatchesBatchFit) {
  Rng rng(4);
  std::vector<std::vector<double>> f;
  PrototypeAccumulator acc;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> v{rng.normal(3.0, 2.0), rng.normal(-1.0, 0.5)};
    acc.add(v);
    f.push_back(v);
  }
  const auto a = acc.finish(1, FeatureSpace::instructed);
  const auto b = fit_prototype(f, 1, FeatureSpace::instructed);
  for (std::size_t d = 0; d < 2; ++d) {
    EXPECT_NEAR(a.mean[d], b.mean[d], 1e-12);
    EXPECT_NEAR(a.variance[d], b.variance[d], 1e-12);
  }
}

TEST(PseudoFeatures, NearDegenerateDrawsStayClose) {
  ClassPrototype p{0, {1.0, -1.0}, {kPrototypeVarianceFloor, kPrototypeVarianceFloor},
                   FeatureSpace::instructed};
  Rng rng(5);
  const auto draws = sample_pseudo_features(p, 3, rng);
  ASSERT_EQ(draws.size(), 3u);
  for (const auto& v : draws) {
    for (std::size_t d = 0; d < 2; ++d) {
      EXPECT_LE(std::abs(v[d] - p.mean[d]), 5.0 * std::sqrt(kPrototypeVarianceFloor));
    }
  }
}

TEST(PseudoFeatures, EmpiricalMeanWithinThreeSigma) {
  ClassPrototype p{0, {2.0, -3.0, 0.5}, {1.0, 4.0, 0.25}, FeatureSpace::uninstructed};
  Rng rng(6);
  const std::size_t n = 100000;
  const auto draws = sample_pseudo_features(p, n, rng);
  for (std::size_t d = 0; d < 3; ++d) {
    double mean = 0.0;
    for (const auto& v : draws) mean += v[d];
    mean /= static_cast<double>(n);
    EXPECT_LE(std::abs(mean - p.mean[d]), 3.0 * std::sqrt(p.variance[d] / n));
  }
}

TEST(PseudoFeatures, DeterministicForASeed) {
  ClassPrototype p{0, {0.0, 1.0}, {1.0, 1.0}, FeatureSpace::uninstructed};
  Rng a(9), b(9);
  EXPECT_EQ(sample_pseudo_features(p, 10, a), sample_pseudo_features(p, 10, b));
}

TEST(CrLoss, NoPriorClassesGivesZero) {
  const std::vector<std::vector<double>> h{{1.0, 2.0}};
  EXPECT_EQ(cr_loss(h, std::vector<std::vector<double>>{}, 0.8).value, 0.0);
}

TEST(CrLoss, SingleFeatureEqualToTheMean) {
  const std::vector<std::vector<double>> h{{0.3, -0.4}};
  EXPECT_NEAR(cr_loss(h, h, 0.8).value, -std::log(2.0), 1e-15);
  EXPECT_NEAR(cr_loss(h, h, 0.8).value, -0.6931, 1e-4);
  EXPECT_NEAR(cr_loss(h, h, 0.8, -1.0).value, std::log(2.0), 1e-15);
}

TEST(CrLoss, LargeTemperatureApproachesUniformPartition) {
  Rng rng(10);
  std::vector<std::vector<double>> h(3, std::vector<double>(4)), mu(2, std::vector<double>(4));
  for (auto* set : {&h, &mu}) {
    for (auto& v : *set) {
      for (double& x : v) x = rng.normal();
    }
  }
  // 3 features x 2 prior classes, each term -> -log(3 + 2).
  EXPECT_NEAR(cr_loss(h, mu, 1e9).value, -6.0 * std::log(5.0), 1e-6);
}

TEST(CrLoss, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  std::vector<std::vector<double>> h(3, std::vector<double>(4)), mu(2, std::vector<double>(4));
  for (auto* set : {&h, &mu}) {
    for (auto& v : *set) {
      for (double& x : v) x = rng.normal();
    }
  }
  const auto r = cr_loss(h, mu, 0.8, 1.0, true);
  for (std::size_t i = 0; i < h.size(); ++i) {
    for (std::size_t d = 0; d < 4; ++d) {
      auto hp = h, hm = h;
      hp[i][d] += 1e-6;
      hm[i][d] -= 1e-6;
      const double fd = (cr_loss(hp, mu, 0.8).value - cr_loss(hm, mu, 0.8).value) / 2e-6;
      EXPECT_NEAR(r.grads[i][d], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(HeadCrossEntropy, SingleClassIsZero) {
  const std::vector<PseudoSample> batch{{{1.0, 2.0}, 0}, {{-1.0, 0.5}, 0}};
  EXPECT_EQ(head_cross_entropy(Matrix(2, 1), Matrix(1, 1), batch, nullptr, nullptr), 0.0);
}

TEST(HeadCrossEntropy, SymmetricTwoClassIsLn2) {
  const std::vector<PseudoSample> batch{{{1.0, 0.0}, 0}, {{0.0, 1.0}, 1}};
  EXPECT_NEAR(head_cross_entropy(Matrix(2, 2), Matrix(1, 2), batch, nullptr, nullptr),
              std::log(2.0), 1e-15);
}

TEST(HeadCrossEntropy, TargetOutsideTheHeadIsADataError) {
  const std::vector<PseudoSample> batch{{{1.0}, 3}};
  EXPECT_THROW(head_cross_entropy(Matrix(1, 2), Matrix(1, 2), batch, nullptr, nullptr), DataError);
}

TEST(Learner, LossBreakdownIsExact) {
  Scenario s;
  TrainConfig train;
  train.lambda = 0.3;
  auto learner = s.learner(train);
  learner.train_task(s.stream.tasks[0]);
  learner.begin_task(s.stream.tasks[1]);
  const std::span<const LabeledSample> batch(s.stream.tasks[1].train.data(), 8);
  const auto eval = learner.evaluate_wtp(batch, nullptr);
  EXPECT_NE(eval.loss.cr, 0.0);
  EXPECT_EQ(eval.loss.total, eval.loss.ce + 0.3 * eval.loss.cr);
  const auto step = learner.wtp_step(batch);
  EXPECT_EQ(step.total, step.ce + 0.3 * step.cr);
}

TEST(Learner, ZeroLambdaGivesPlainCrossEntropy) {
  Scenario s;
  TrainConfig train;
  train.lambda = 0.0;
  auto learner = s.learner(train);
  learner.train_task(s.stream.tasks[0]);
  learner.begin_task(s.stream.tasks[1]);
  const std::span<const LabeledSample> batch(s.stream.tasks[1].train.data(), 8);
  const auto eval = learner.evaluate_wtp(batch, nullptr);
  EXPECT_EQ(eval.loss.total, eval.loss.ce);
}

TEST(Learner, LabelOutsideTheTaskIsADataError) {
  Scenario s;
  auto learner = s.learner();
  learner.begin_task(s.stream.tasks[0]);
  std::vector<LabeledSample> batch{s.stream.tasks[1].train.front()};
  EXPECT_THROW(learner.wtp_step(batch), DataError);
}

TEST(Learner, OutOfOrderTaskIsAStateError) {
  Scenario s;
  auto learner = s.learner();
  EXPECT_THROW(learner.train_task(s.stream.tasks[1]), StateError);
  learner.train_task(s.stream.tasks[0]);
  EXPECT_THROW(learner.train_task(s.stream.tasks[0]), StateError);
}

TEST(Learner, SeparableBatchIsFitted) {
  Scenario s(1);
  TrainConfig train;
  train.lambda = 0.0;
  train.lr_classifier = 0.5;
  train.lr_prompt = 0.1;
  train.lr_router = 0.1;
  auto learner = s.learner(train);
  learner.begin_task(s.stream.tasks[0]);
  // Two well-separated samples, one per class.
  const auto& t = s.stream.tasks[0];
  std::vector<LabeledSample> batch;
  for (std::size_t c : t.classes) {
    for (const auto& x : t.train) {
      if (x.label == c) {
        batch.push_back(x);
        break;
      }
    }
  }
  double ce = 1.0;
  for (int i = 0; i < 2000 && ce >= 0.01; ++i) ce = learner.wtp_step(batch).ce;
  EXPECT_LT(ce, 0.01);
}

TEST(Learner, FrozenPromptsTouchOnlyCurrentClassifierColumns) {
  Scenario s;
  TrainConfig train;
  train.lambda = 0.0;
  auto learner = s.learner(train);
  learner.train_task(s.stream.tasks[0]);
  learner.begin_task(s.stream.tasks[1]);
  GradTape tape;
  const std::span<const LabeledSample> batch(s.stream.tasks[1].train.data(), 8);
  learner.evaluate_wtp(batch, &tape);
  const auto& st = learner.state();
  const Matrix& gw = tape.at("classifier.w");
  const Matrix& gb = tape.at("classifier.b");
  for (std::size_t c : s.stream.tasks[0].classes) {
    const std::size_t col = st.column_of(c);
    EXPECT_EQ(gb(0, col), 0.0);
    for (std::size_t r = 0; r < gw.rows(); ++r) EXPECT_EQ(gw(r, col), 0.0);
  }
  double current = 0.0;
  for (std::size_t c : s.stream.tasks[1].classes) current += std::abs(gb(0, st.column_of(c)));
  EXPECT_GT(current, 0.0);
}

TEST(Learner, PrototypeAndHeadAccountingGrowsWithClasses) {
  Scenario s(3);
  auto learner = s.learner();
  std::size_t seen = 0;
  for (const auto& task : s.stream.tasks) {
    learner.train_task(task);
    seen += task.classes.size();
    const auto& st = learner.state();
    EXPECT_EQ(st.instructed.size(), seen);
    EXPECT_EQ(st.uninstructed.size(), seen);
    EXPECT_EQ(st.heads.num_classes(), seen);
    EXPECT_EQ(st.heads.num_tasks(), task.task + 1);
    EXPECT_EQ(st.routers.size(), task.task + 1);
  }
}

TEST(Learner, StateHoldsNoRawSamples) {
  Scenario s;
  auto learner = s.learner();
  learner.train_task(s.stream.tasks[0]);
  const auto& st = learner.state();
  // Nothing of raw width survives: prototypes live in feature space, and every
  // stored vector has the encoder width.
  for (const auto* protos : {&st.instructed, &st.uninstructed}) {
    for (const auto& [c, p] : *protos) {
      EXPECT_EQ(p.mean.size(), s.enc.dim);
      for (const auto& x : s.stream.tasks[0].train) {
        EXPECT_NE(std::vector<double>(x.raw.begin(), x.raw.end()), p.mean);
      }
    }
  }
  EXPECT_EQ(st.class_order.size(), s.stream.tasks[0].classes.size());
}

TEST(Learner, SingleTaskTiiIsZeroAndInferenceUsesTheOnlyTask) {
  Scenario s(1);
  auto learner = s.learner();
  learner.train_task(s.stream.tasks[0]);
  Rng rng(3);
  const auto tii = learner.draw_tii_set(rng);
  EXPECT_EQ(head_cross_entropy(learner.state().heads.task_w, learner.state().heads.task_b, tii,
                               nullptr, nullptr),
            0.0);
  for (const auto& x : s.stream.tasks[0].test) {
    EXPECT_EQ(learner.predict_task(x.raw), 0u);
    EXPECT_EQ(learner.infer(x.raw), learner.predict_class(x.raw, 0));
    EXPECT_EQ(learner.infer(x.raw), learner.infer(x.raw));
  }
}

TEST(Learner, TapLossDecreasesOnAFixedPseudoSet) {
  Scenario s;
  auto learner = s.learner();
  learner.train_task(s.stream.tasks[0]);
  Rng rng(12);
  const auto set = learner.draw_tap_set(rng);
  double prev = learner.tap_step(set);
  for (int i = 0; i < 5; ++i) {
    const double next = learner.tap_step(set);
    EXPECT_LT(next, prev);
    prev = next;
  }
}

TEST(Learner, TaskPredictorSeparatesDistantTasks) {
  Scenario s;
  TrainConfig train;
  train.lr_task_head = 0.5;
  auto learner = s.learner(train);
  for (const auto& task : s.stream.tasks) learner.train_task(task);
  for (int i = 0; i < 200; ++i) {
    Rng rng(100 + i);
    learner.tii_step(learner.draw_tii_set(rng));
  }
  Rng held(999);
  const auto eval = learner.draw_tii_set(held);
  const auto& h = learner.state().heads;
  std::size_t correct = 0;
  for (const auto& p : eval) {
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t t = 0; t < h.num_tasks(); ++t) {
      double v = h.task_b(0, t);
      for (std::size_t d = 0; d < p.feature.size(); ++d) v += p.feature[d] * h.task_w(d, t);
      if (v > best_v) {
        best_v = v;
        best = t;
      }
    }
    correct += best == p.target;
  }
  // Pseudo features of a fixed backbone; synthetic tasks overlap by design, so
  // this checks the predictor learned well above chance rather than perfection.
  EXPECT_GT(static_cast<double>(correct) / eval.size(), 0.6);
}

TEST(Learner, DeterministicGivenSeed) {
  Scenario s;
  auto a = s.learner();
  auto b = s.learner();
  const auto ra = a.train_task(s.stream.tasks[0]);
  const auto rb = b.train_task(s.stream.tasks[0]);
  ASSERT_EQ(ra.epochs.size(), rb.epochs.size());
  for (std::size_t i = 0; i < ra.epochs.size(); ++i) {
    EXPECT_EQ(ra.epochs[i].wtp.total, rb.epochs[i].wtp.total);
    EXPECT_EQ(ra.epochs[i].tap, rb.epochs[i].tap);
  }
  for (const auto& x : s.stream.tasks[0].test) EXPECT_EQ(a.infer(x.raw), b.infer(x.raw));
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.tau = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
  PoolConfig p;
  p.top_k = 16;
  try {
    p.validate();
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("16"), std::string::npos);
    EXPECT_NE(msg.find("15"), std::string::npos);
  }
}
