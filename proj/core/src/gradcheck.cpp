#include "hashcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "hashcl/errors.hpp"
#include "hashcl/training.hpp"

namespace hashcl {

const std::vector<std::string>& gradcheck_groups() {
  static const std::vector<std::string> groups = {"prompts", "routers", "classifier",
                                                  "task_predictor", "encoder"};
  return groups;
}

namespace {

std::vector<EntryIndex> pick_entries(const Matrix& m, std::size_t count, Rng& rng) {
  std::vector<EntryIndex> all;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) all.push_back({r, c});
  }
  if (all.size() <= count) return all;
  rng.shuffle(all);
  all.resize(count);
  return all;
}

class GroupAccumulator {
 public:
  GroupAccumulator(std::string group, const GradcheckOptions& opt, Rng rng)
      : opt_(opt), rng_(std::move(rng)) {
    result_.group = std::move(group);
  }

  /// `param` is mutated in place by the probe and restored afterwards.
  void check(const std::string& name, Matrix& param, const Matrix& analytic,
             const std::function<double()>& loss) {
    const auto entries = pick_entries(param, opt_.entries_per_tensor, rng_);
    const double corrupt = opt_.corrupt_group == result_.group ? 1.01 : 1.0;
    const ScalarLoss probe = [&](const Matrix& value) {
      const Matrix saved = param;
      param = value;
      const double l = loss();
      param = saved;
      return l;
    };
    const auto fd = finite_difference_entries(probe, param, entries, opt_.step);
    std::vector<double> a;
    for (const auto& e : entries) a.push_back(analytic(e.row, e.col) * corrupt);
    const auto cmp = compare_gradients(a, fd);
    result_.checked += cmp.checked;
    result_.max_relative_error = std::max(result_.max_relative_error, cmp.max_relative_error);
    if (cmp.max_relative_error > opt_.tolerance) result_.offending.push_back(name);
  }

  GroupCheck finish() const { return result_; }

 private:
  const GradcheckOptions& opt_;
  Rng rng_;
  GroupCheck result_;
};

TaskData small_task(std::size_t task, std::size_t classes, std::size_t per_class,
                    std::size_t raw_dim, Rng& rng) {
  TaskData t;
  t.task = task;
  for (std::size_t j = 0; j < classes; ++j) {
    const std::size_t c = task * classes + j;
    t.classes.push_back(c);
    std::vector<double> mean(raw_dim);
    for (double& x : mean) x = 2.0 * rng.normal();
    for (std::size_t s = 0; s < per_class; ++s) {
      LabeledSample sample{mean, c};
      for (double& x : sample.raw) x += rng.normal();
      t.train.push_back(sample);
      t.test.push_back(sample);
    }
  }
  return t;
}

}  // namespace

std::vector<GroupCheck> run_gradcheck(const ExperimentConfig& cfg, const GradcheckOptions& opt) {
  cfg.validate();
  if (opt.corrupt_group &&
      std::find(gradcheck_groups().begin(), gradcheck_groups().end(), *opt.corrupt_group) ==
          gradcheck_groups().end()) {
    throw ArgumentError("unknown gradcheck group " + *opt.corrupt_group);
  }
  const Rng root = Rng(opt.seed).split("gradcheck");
  Rng data_rng = root.split("data");
  Rng init_rng = root.split("backbone");
  auto backbone = std::make_shared<EncoderWeights>(EncoderWeights::init(cfg.encoder, init_rng));

  const std::size_t classes = std::max<std::size_t>(2, cfg.data.classes_per_task);
  const TaskData first = small_task(0, classes, opt.samples_per_class, cfg.encoder.raw_dim,
                                    data_rng);
  const TaskData second = small_task(1, classes, opt.samples_per_class, cfg.encoder.raw_dim,
                                     data_rng);

  // Train one task so the second one sees prior prototypes (CR active),
  // inherited routers and non-trivial classifier columns.
  TrainConfig train = cfg.train;
  train.epochs = 1;
  train.batch_size = opt.batch_size;
  train.pseudo_per_class = 8;
  if (train.lambda == 0.0) train.lambda = 0.1;
  ContinualLearner learner(cfg.encoder, backbone, cfg.pool, cfg.modulator, train, opt.seed);
  learner.train_task(first);
  learner.begin_task(second);
  for (std::size_t start = 0; start + opt.batch_size <= second.train.size();
       start += opt.batch_size) {
    learner.wtp_step(std::span(second.train).subspan(start, opt.batch_size));
  }
  // Classifier bias and columns away from zero so every entry is exercised.
  {
    Rng head_rng = root.split("heads");
    auto& h = learner.mutable_state().heads;
    for (double& v : h.classifier_w.values()) v += 0.1 * head_rng.normal();
    for (double& v : h.classifier_b.values()) v += 0.1 * head_rng.normal();
  }

  Rng pick = root.split("batch");
  std::vector<LabeledSample> batch = second.train;
  pick.shuffle(batch);
  batch.resize(std::min(opt.batch_size, batch.size()));

  // Hold routing fixed at the current selection so the loss is smooth.
  const WtpEvaluation base = learner.evaluate_wtp(batch, nullptr);
  SelectionOverride fixed;
  for (const auto& per_sample : base.decisions) {
    std::vector<std::vector<std::size_t>> sel;
    for (const auto& d : per_sample) sel.push_back(d.selected);
    fixed.push_back(std::move(sel));
  }
  GradTape tape;
  learner.evaluate_wtp(batch, &tape, &fixed);
  auto wtp_loss = [&] { return learner.evaluate_wtp(batch, nullptr, &fixed).loss.total; };

  std::vector<GroupCheck> out;
  LearnerState& state = learner.mutable_state();
  const std::size_t task = learner.active_task();

  {
    GroupAccumulator acc("prompts", opt, root.split("prompts"));
    std::set<std::pair<std::size_t, std::size_t>> used;
    for (const auto& per_sample : fixed) {
      for (std::size_t slot = 0; slot < per_sample.size(); ++slot) {
        for (auto e : per_sample[slot]) used.insert({slot, e});
      }
    }
    for (const auto& [slot, e] : used) {
      const std::string name = expert_param_name(slot, e);
      Matrix& p = state.pools[slot].prompt(e);
      acc.check(name, p, tape.get_or_zero(name, p.rows(), p.cols()), wtp_loss);
    }
    out.push_back(acc.finish());
  }
  {
    GroupAccumulator acc("routers", opt, root.split("routers"));
    for (std::size_t slot = 0; slot < state.pools.size(); ++slot) {
      const std::string name = router_param_name(task, slot);
      Matrix& w = state.routers[task].weights[slot];
      acc.check(name, w, tape.get_or_zero(name, w.rows(), w.cols()), wtp_loss);
    }
    // A single selected expert always gets weight 1, so the loss does not depend on the router.
    GroupCheck g = acc.finish();
    g.expects_entries = cfg.pool.top_k > 1;
    out.push_back(g);
  }
  {
    GroupAccumulator acc("classifier", opt, root.split("classifier"));
    acc.check("classifier.w", state.heads.classifier_w, tape.at("classifier.w"), wtp_loss);
    acc.check("classifier.b", state.heads.classifier_b, tape.at("classifier.b"), wtp_loss);
    out.push_back(acc.finish());
  }
  {
    GroupAccumulator acc("task_predictor", opt, root.split("task_predictor"));
    Rng pseudo_rng = root.split("pseudo");
    const auto set = learner.draw_tii_set(pseudo_rng);
    Heads& h = state.heads;
    Rng head_rng = root.split("task-head");
    for (double& v : h.task_w.values()) v += 0.1 * head_rng.normal();
    for (double& v : h.task_b.values()) v += 0.1 * head_rng.normal();
    Matrix gw(h.task_w.rows(), h.task_w.cols()), gb(1, h.task_b.cols());
    head_cross_entropy(h.task_w, h.task_b, set, &gw, &gb);
    auto loss = [&] { return head_cross_entropy(h.task_w, h.task_b, set, nullptr, nullptr); };
    acc.check("task.w", h.task_w, gw, loss);
    acc.check("task.b", h.task_b, gb, loss);
    out.push_back(acc.finish());
  }
  {
    // Pretraining loss: CE of a fixed random probe on pooled uninstructed features.
    GroupAccumulator acc("encoder", opt, root.split("encoder"));
    EncoderWeights w = *backbone;
    Rng probe_rng = root.split("probe");
    const Matrix head = probe_rng.normal_matrix(cfg.encoder.dim, classes, 1.0);
    std::vector<Matrix> tokens;
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < std::min<std::size_t>(3, first.train.size()); ++i) {
      const auto& s = first.train[i * opt.samples_per_class % first.train.size()];
      tokens.push_back(lift_tokens(s.raw, w, cfg.encoder));
      targets.push_back(s.label % classes);
    }
    auto loss_and_grad = [&](GradTape* tape_out) {
      double total = 0.0;
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        ForwardCache cache;
        const auto f = forward_uninstructed(w, cfg.encoder, tokens[i],
                                            tape_out ? &cache : nullptr).pooled;
        std::vector<double> logits(classes, 0.0);
        for (std::size_t j = 0; j < classes; ++j) {
          for (std::size_t r = 0; r < f.size(); ++r) logits[j] += f[r] * head(r, j);
        }
        const double lse = log_sum_exp(logits);
        total += lse - logits[targets[i]];
        if (tape_out != nullptr) {
          std::vector<double> df(f.size(), 0.0);
          for (std::size_t j = 0; j < classes; ++j) {
            const double dz = std::exp(logits[j] - lse) - (j == targets[i] ? 1.0 : 0.0);
            for (std::size_t r = 0; r < f.size(); ++r) df[r] += head(r, j) * dz;
          }
          encoder_backward(w, cfg.encoder, cache, df, tape_out);
        }
      }
      return total;
    };
    GradTape enc_tape;
    loss_and_grad(&enc_tape);
    for (auto& [name, param] : w.trainable()) {
      acc.check(name, *param, enc_tape.get_or_zero(name, param->rows(), param->cols()),
                [&] { return loss_and_grad(nullptr); });
    }
    out.push_back(acc.finish());
  }
  return out;
}

}  // namespace hashcl
