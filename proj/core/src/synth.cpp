#include "hashcl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>

#include "hashcl/errors.hpp"
#include "hashcl/optim.hpp"
#include "hashcl/training.hpp"

namespace hashcl {

void DataConfig::validate() const {
  if (tasks == 0) throw ConfigError("tasks must be >= 1");
  if (classes_per_task == 0) throw ConfigError("classes_per_task must be >= 1");
  if (train_per_class < 2 || test_per_class < 2) {
    throw ConfigError("train_per_class and test_per_class must be >= 2");
  }
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  if (!(mean_radius > 0.0) || !(pretrain_radius > 0.0)) {
    throw ConfigError("mean_radius and pretrain_radius must be > 0");
  }
  if (!(noise_std >= 0.0) || !(offset_scale >= 0.0)) {
    throw ConfigError("noise_std and offset_scale must be >= 0");
  }
  if (pretrain_classes < 2 || pretrain_train_per_class < 2 || pretrain_test_per_class < 2) {
    throw ConfigError("pretraining needs >= 2 classes with >= 2 samples per split");
  }
}

namespace {

std::vector<double> random_direction(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

std::vector<double> on_sphere(std::vector<double> v, double radius) {
  const double norm = std::sqrt(dot(v, v));
  for (double& x : v) x *= radius / norm;
  return v;
}

std::vector<LabeledSample> draw_samples(const std::vector<std::vector<double>>& means,
                                        const std::vector<std::size_t>& classes,
                                        std::size_t per_class, double noise, Rng& rng) {
  std::vector<LabeledSample> out;
  out.reserve(means.size() * per_class);
  for (std::size_t j = 0; j < means.size(); ++j) {
    for (std::size_t s = 0; s < per_class; ++s) {
      LabeledSample sample;
      sample.label = classes[j];
      sample.raw.resize(means[j].size());
      for (std::size_t i = 0; i < means[j].size(); ++i) {
        sample.raw[i] = means[j][i] + noise * rng.normal();
      }
      out.push_back(std::move(sample));
    }
  }
  return out;
}

}  // namespace

Stream generate_stream(const DataConfig& cfg, std::size_t raw_dim, std::uint64_t seed) {
  cfg.validate();
  Stream stream;
  const Rng root = Rng(seed).split("stream");
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    Rng means_rng = root.split("means").split(t);
    TaskSpec spec;
    spec.task = t;
    spec.noise_std = cfg.noise_std;
    if (t > 0) spec.related_task = t - 1;
    for (std::size_t j = 0; j < cfg.classes_per_task; ++j) {
      spec.classes.push_back(t * cfg.classes_per_task + j);
      const auto fresh = random_direction(means_rng, raw_dim);
      const auto offset = random_direction(means_rng, raw_dim);
      std::vector<double> mean(raw_dim);
      if (t == 0) {
        mean = fresh;
      } else {
        const auto base = on_sphere(stream.specs[t - 1].means[j], 1.0);
        for (std::size_t i = 0; i < raw_dim; ++i) {
          mean[i] = cfg.rho * base[i] + (1.0 - cfg.rho) * fresh[i] + cfg.offset_scale * offset[i];
        }
      }
      spec.means.push_back(on_sphere(std::move(mean), cfg.mean_radius));
    }
    Rng sample_rng = root.split("samples").split(t);
    TaskData data;
    data.task = t;
    data.classes = spec.classes;
    data.train = draw_samples(spec.means, spec.classes, cfg.train_per_class, cfg.noise_std,
                              sample_rng);
    data.test = draw_samples(spec.means, spec.classes, cfg.test_per_class, cfg.noise_std,
                             sample_rng);
    stream.specs.push_back(std::move(spec));
    stream.tasks.push_back(std::move(data));
  }
  return stream;
}

double related_mean_cosine(const Stream& stream, std::size_t task) {
  const TaskSpec& spec = stream.specs.at(task);
  if (!spec.related_task) {
    throw ArgumentError("task " + std::to_string(task) + " has no related task");
  }
  const TaskSpec& other = stream.specs.at(*spec.related_task);
  double sum = 0.0;
  for (std::size_t j = 0; j < spec.means.size(); ++j) {
    const auto& a = spec.means[j];
    const auto& b = other.means[j];
    sum += dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
  }
  return sum / static_cast<double>(spec.means.size());
}

TaskData generate_pretrain_set(const DataConfig& cfg, std::size_t raw_dim, std::size_t first_class,
                               std::uint64_t seed) {
  cfg.validate();
  Rng rng = Rng(seed).split("pretrain-data");
  std::vector<std::vector<double>> means;
  std::vector<std::size_t> classes;
  for (std::size_t j = 0; j < cfg.pretrain_classes; ++j) {
    classes.push_back(first_class + j);
    means.push_back(on_sphere(random_direction(rng, raw_dim), cfg.pretrain_radius));
  }
  TaskData data;
  data.task = 0;
  data.classes = classes;
  data.train = draw_samples(means, classes, cfg.pretrain_train_per_class, cfg.noise_std, rng);
  data.test = draw_samples(means, classes, cfg.pretrain_test_per_class, cfg.noise_std, rng);
  return data;
}

namespace {

struct LinearProbe {
  Matrix w, b;
};

std::size_t probe_predict(const LinearProbe& head, std::span<const double> f) {
  std::size_t best = 0;
  double best_z = 0.0;
  for (std::size_t j = 0; j < head.w.cols(); ++j) {
    double z = head.b(0, j);
    for (std::size_t i = 0; i < f.size(); ++i) z += f[i] * head.w(i, j);
    if (j == 0 || z > best_z) {
      best = j;
      best_z = z;
    }
  }
  return best;
}

}  // namespace

PretrainResult pretrain_backbone(const EncoderConfig& cfg, const TaskData& data,
                                 const PretrainConfig& pcfg, std::span<const TaskData> stream,
                                 std::uint64_t seed) {
  cfg.validate();
  std::set<std::size_t> stream_classes;
  for (const auto& t : stream) stream_classes.insert(t.classes.begin(), t.classes.end());
  for (std::size_t c : data.classes) {
    if (stream_classes.count(c) != 0) {
      throw ConfigError("pretrain class " + std::to_string(c) + " also appears in the stream");
    }
  }
  if (data.classes.empty() || data.train.empty() || data.test.empty()) {
    throw DataError("pretrain set is empty");
  }
  std::map<std::size_t, std::size_t> column;
  for (std::size_t j = 0; j < data.classes.size(); ++j) column[data.classes[j]] = j;

  Rng rng = Rng(seed).split("pretrain");
  Rng init_rng = rng.split("init");
  auto weights = std::make_shared<EncoderWeights>(EncoderWeights::init(cfg, init_rng));
  LinearProbe head{Matrix(cfg.dim, data.classes.size()), Matrix(1, data.classes.size())};
  Optimizer opt(OptimizerKind::adam);

  auto accuracy = [&]() {
    std::size_t correct = 0;
    for (const auto& s : data.test) {
      const auto f =
          forward_uninstructed(*weights, cfg, lift_tokens(s.raw, *weights, cfg)).pooled;
      if (probe_predict(head, f) == column.at(s.label)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.test.size());
  };

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto run_epoch = [&](Rng& epoch_rng, bool train_encoder, double lr) {
    epoch_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += pcfg.batch_size) {
      const std::size_t end = std::min(start + pcfg.batch_size, order.size());
      const double inv = 1.0 / static_cast<double>(end - start);
      GradTape tape;
      Matrix gw(head.w.rows(), head.w.cols()), gb(1, head.b.cols());
      std::vector<double> logits(head.w.cols());
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = data.train[order[i]];
        ForwardCache cache;
        const auto f = forward_uninstructed(*weights, cfg, lift_tokens(s.raw, *weights, cfg),
                                            train_encoder ? &cache : nullptr)
                           .pooled;
        for (std::size_t j = 0; j < logits.size(); ++j) {
          double z = head.b(0, j);
          for (std::size_t r = 0; r < f.size(); ++r) z += f[r] * head.w(r, j);
          logits[j] = z;
        }
        const double lse = log_sum_exp(logits);
        std::vector<double> df(f.size(), 0.0);
        const std::size_t target = column.at(s.label);
        for (std::size_t j = 0; j < logits.size(); ++j) {
          const double dz = (std::exp(logits[j] - lse) - (j == target ? 1.0 : 0.0)) * inv;
          gb(0, j) += dz;
          for (std::size_t r = 0; r < f.size(); ++r) {
            gw(r, j) += f[r] * dz;
            df[r] += head.w(r, j) * dz;
          }
        }
        if (train_encoder) encoder_backward(*weights, cfg, cache, df, &tape);
      }
      if (train_encoder) {
        for (auto& [name, param] : weights->trainable()) {
          if (tape.contains(name)) opt.step(name, *param, tape.at(name), lr);
        }
      }
      opt.step("head.w", head.w, gw, train_encoder ? lr : pcfg.head_lr);
      opt.step("head.b", head.b, gb, train_encoder ? lr : pcfg.head_lr);
    }
  };

  PretrainResult result;
  for (std::size_t epoch = 0; epoch < pcfg.head_epochs; ++epoch) {
    Rng epoch_rng = rng.split("head-epoch").split(epoch);
    run_epoch(epoch_rng, false, pcfg.head_lr);
  }
  // Fresh moments for the joint stage.
  opt.reset();
  for (std::size_t epoch = 0; epoch < std::max<std::size_t>(1, pcfg.max_epochs); ++epoch) {
    Rng epoch_rng = rng.split("epoch").split(epoch);
    run_epoch(epoch_rng, true, pcfg.lr);
    result.epochs = epoch + 1;
    result.heldout_accuracy = accuracy();
    if (result.heldout_accuracy > pcfg.target_accuracy) break;
  }
  result.weights = std::move(weights);
  return result;
}

void write_stream_csv(std::ostream& out, const Stream& stream) {
  const std::size_t n =
      stream.tasks.empty() || stream.tasks.front().train.empty()
          ? 0
          : stream.tasks.front().train.front().raw.size();
  out << "split,task,class";
  for (std::size_t i = 0; i < n; ++i) out << ",x" << i;
  out << '\n';
  out << std::setprecision(9);
  for (const auto& t : stream.tasks) {
    for (const auto* split : {&t.train, &t.test}) {
      const char* name = split == &t.train ? "train" : "test";
      for (const auto& s : *split) {
        out << name << ',' << t.task << ',' << s.label;
        for (double x : s.raw) out << ',' << x;
        out << '\n';
      }
    }
  }
}

}  // namespace hashcl
