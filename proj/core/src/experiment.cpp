#include "hashcl/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "hashcl/checkpoint.hpp"
#include "hashcl/errors.hpp"

namespace hashcl {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_number(double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return buf;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

PretrainResult BackboneCache::get(const ExperimentConfig& cfg, std::uint64_t seed,
                                  const Stream& stream) {
  // Everything that feeds pretraining, and nothing that does not.
  json key;
  key["seed"] = seed;
  key["enc"] = {cfg.encoder.n_layers, cfg.encoder.dim,     cfg.encoder.n_heads,
                cfg.encoder.tokens,   cfg.encoder.raw_dim, cfg.encoder.mlp_ratio,
                cfg.encoder.residual_init_scale};
  key["data"] = {cfg.data.tasks,           cfg.data.classes_per_task,
                 cfg.data.pretrain_classes, cfg.data.pretrain_train_per_class,
                 cfg.data.pretrain_test_per_class, cfg.data.pretrain_radius,
                 cfg.data.noise_std};
  key["pre"] = {cfg.pretrain.head_epochs, cfg.pretrain.head_lr, cfg.pretrain.max_epochs, cfg.pretrain.batch_size, cfg.pretrain.lr,
                cfg.pretrain.target_accuracy};
  const std::string k = key.dump();
  std::shared_ptr<std::once_flag> flag;
  {
    std::lock_guard lock(mutex_);
    auto& slot = flags_[k];
    if (!slot) slot = std::make_shared<std::once_flag>();
    flag = slot;
  }
  std::call_once(*flag, [&] {
    const std::size_t first = cfg.data.tasks * cfg.data.classes_per_task;
    const TaskData pre = generate_pretrain_set(cfg.data, cfg.encoder.raw_dim, first, seed);
    PretrainResult r = pretrain_backbone(cfg.encoder, pre, cfg.pretrain, stream.tasks, seed);
    std::lock_guard lock(mutex_);
    results_[k] = std::move(r);
  });
  std::lock_guard lock(mutex_);
  return results_.at(k);
}

namespace {

class EventLog {
 public:
  explicit EventLog(const fs::path& path) : out_(path, std::ios::app) {
    if (!out_) throw Error("cannot open " + path.string());
  }
  void write(const std::string& kind, json body) {
    body["kind"] = kind;
    out_ << body.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

double task_accuracy(const ContinualLearner& learner, const TaskData& task) {
  std::size_t correct = 0;
  for (const auto& s : task.test) {
    if (learner.infer(s.raw) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(task.test.size());
}

void write_metrics_csv(const fs::path& path, const SeedResult& r) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << "metric,task,after_task,value\n";
  const std::size_t tasks = r.accuracy.tasks();
  for (std::size_t t = 0; t < tasks; ++t) {
    for (std::size_t i = 0; i <= t; ++i) {
      out << "accuracy," << i << ',' << t << ',' << format_number(r.accuracy.at(i, t)) << '\n';
    }
  }
  out << "faa,,," << format_number(r.faa) << '\n';
  out << "caa,,," << format_number(r.caa) << '\n';
  out << "fm,,," << (r.fm ? format_number(*r.fm) : std::string()) << '\n';
  for (std::size_t l = 0; l < r.utilization.layers.size(); ++l) {
    out << "utilization_variance," << ',' << l << ','
        << format_number(r.utilization.layers[l].variance) << '\n';
  }
  out << "pretrain_accuracy,,," << format_number(r.pretrain_accuracy) << '\n';
}

json aggregate_json(const Aggregate& a) {
  json j;
  j["mean"] = a.mean;
  j["std"] = a.std ? json(*a.std) : json(nullptr);
  j["count"] = a.count;
  return j;
}

RunSummary summarize(std::vector<SeedResult> results) {
  RunSummary s;
  std::vector<double> faa, caa, fm, var;
  for (const auto& r : results) {
    faa.push_back(r.faa);
    caa.push_back(r.caa);
    if (r.fm) fm.push_back(*r.fm);
    var.push_back(r.utilization.mean_variance());
  }
  s.faa = aggregate(faa);
  s.caa = aggregate(caa);
  s.fm = aggregate(fm);
  s.utilization_variance = aggregate(var);
  s.seeds = std::move(results);
  return s;
}

void write_summary(const fs::path& path, const RunSummary& s) {
  json j;
  json seeds = json::array();
  for (const auto& r : s.seeds) {
    json one;
    one["seed"] = r.seed;
    one["faa"] = r.faa;
    one["caa"] = r.caa;
    one["fm"] = r.fm ? json(*r.fm) : json(nullptr);
    one["utilization_variance"] = r.utilization.mean_variance();
    one["pretrain_accuracy"] = r.pretrain_accuracy;
    seeds.push_back(one);
  }
  j["seeds"] = seeds;
  j["faa"] = aggregate_json(s.faa);
  j["caa"] = aggregate_json(s.caa);
  j["fm"] = s.fm.count == 0 ? json(nullptr) : aggregate_json(s.fm);
  j["utilization_variance"] = aggregate_json(s.utilization_variance);
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << j.dump(2) << '\n';
}

/// Runs `count` jobs on up to `jobs` threads; rethrows the first failure.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      {
        std::lock_guard lock(failure_mutex);
        if (failure) return;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir,
                    BackboneCache& backbones, const LogFn& log) {
  cfg.validate();
  fs::create_directories(dir);
  fs::remove(dir / "events.jsonl");
  EventLog events(dir / "events.jsonl");

  const Stream stream = generate_stream(cfg.data, cfg.encoder.raw_dim, seed);
  const PretrainResult backbone = backbones.get(cfg, seed, stream);
  if (log) {
    log("seed " + std::to_string(seed) + ": backbone held-out accuracy " +
        format_number(backbone.heldout_accuracy) + " after " + std::to_string(backbone.epochs) +
        " epochs");
  }

  ContinualLearner learner(cfg.encoder, backbone.weights, cfg.pool, cfg.modulator, cfg.train,
                           seed);
  SeedResult result;
  result.seed = seed;
  result.pretrain_accuracy = backbone.heldout_accuracy;
  result.accuracy = AccuracyMatrix(stream.tasks.size());

  for (const auto& task : stream.tasks) {
    std::vector<PromptPool> before = learner.state().pools;
    learner.train_task(task, [&](const EpochRecord& rec) {
      events.write("epoch_loss", {{"seed", seed},
                                  {"task", rec.task},
                                  {"epoch", rec.epoch},
                                  {"ce", rec.wtp.ce},
                                  {"cr", rec.wtp.cr},
                                  {"wtp", rec.wtp.total},
                                  {"tii", rec.tii},
                                  {"tap", rec.tap}});
    });
    const auto& state = learner.state();
    const auto& ledger = state.ledger;
    // Drift of each expert during this task, weighted by its frozen history.
    std::vector<double> regularizer;
    for (std::size_t l = 0; l < state.pools.size(); ++l) {
      const auto frozen = ledger.frozen_counts(l);
      double r = 0.0;
      for (std::size_t e = 0; e < state.pools[l].num_experts(); ++e) {
        r += history_regularizer(state.pools[l].prompt(e), before[l].prompt(e),
                                 static_cast<double>(frozen[e]));
      }
      regularizer.push_back(r);
    }
    events.write("task_boundary", {{"seed", seed},
                                   {"task", task.task},
                                   {"classes", task.classes},
                                   {"history_regularizer", regularizer}});
    for (std::size_t l = 0; l < ledger.num_layers(); ++l) {
      const auto counts = ledger.counts(l);
      const auto prot = ledger.protected_set(l);
      events.write("ledger_snapshot",
                   {{"seed", seed},
                    {"task", task.task},
                    {"layer", l},
                    {"counts", std::vector<std::uint64_t>(counts.begin(), counts.end())},
                    {"protected", std::vector<std::size_t>(prot.begin(), prot.end())}});
    }

    std::vector<double> accs;
    for (std::size_t i = 0; i <= task.task; ++i) {
      const double a = task_accuracy(learner, stream.tasks[i]);
      result.accuracy.set(i, task.task, a);
      accs.push_back(a);
    }
    double avg = 0.0;
    for (double a : accs) avg += a;
    avg /= static_cast<double>(accs.size());
    events.write("eval",
                 {{"seed", seed}, {"after_task", task.task}, {"accuracy", accs}, {"average", avg}});
    if (log) {
      log("seed " + std::to_string(seed) + ": task " + std::to_string(task.task) +
          " average accuracy " + format_number(avg));
    }
  }

  result.faa = compute_faa(result.accuracy);
  result.caa = compute_caa(result.accuracy);
  result.fm = compute_fm(result.accuracy);
  result.utilization = utilization_report(learner.state().ledger);
  write_metrics_csv(dir / "metrics.csv", result);
  save_checkpoint(dir / "checkpoint.bin", learner_tensors(learner.state()));
  return result;
}

RunSummary run_experiment(const ExperimentConfig& cfg, const fs::path& out, std::size_t jobs,
                          const LogFn& log, BackboneCache* backbones) {
  cfg.validate();
  fs::create_directories(out);
  {
    std::ofstream c(out / "config.json");
    c << config_to_json(cfg);
  }
  BackboneCache local;
  BackboneCache& cache = backbones != nullptr ? *backbones : local;
  std::vector<SeedResult> results(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), jobs, [&](std::size_t i) {
    const auto seed = cfg.seeds[i];
    results[i] = run_seed(cfg, seed, out / ("seed_" + std::to_string(seed)), cache, log);
  });
  RunSummary summary = summarize(std::move(results));
  write_summary(out / "summary.json", summary);
  return summary;
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"components",  "n_experts",     "prompt_length",
                                                "psi_variant", "gamma_variant", "delta",
                                                "alpha"};
  return axes;
}

namespace {

double parse_double(const std::string& axis, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) {
    throw ConfigError("axis " + axis + ": '" + v + "' is not a number");
  }
  return x;
}

std::size_t parse_count(const std::string& axis, const std::string& v) {
  const double x = parse_double(axis, v);
  if (x < 0 || x != std::floor(x)) {
    throw ConfigError("axis " + axis + ": '" + v + "' is not a non-negative integer");
  }
  return static_cast<std::size_t>(x);
}

}  // namespace

std::vector<AblationCell> ablation_grid(const ExperimentConfig& base, const std::string& axis,
                                        const std::optional<std::vector<std::string>>& values) {
  static const std::map<std::string, std::vector<std::string>> defaults = {
      {"components", {"moe", "hdr", "hgm", "both"}},
      {"n_experts", {"10", "15", "20", "25"}},
      {"prompt_length", {"6", "10", "16", "20", "26"}},
      {"psi_variant", {"stepwise", "logarithmic", "polynomial"}},
      {"gamma_variant", {"piecewise", "inverse", "exponential"}},
      {"delta", {"0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8"}},
      {"alpha", {"0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"}},
  };
  auto it = defaults.find(axis);
  if (it == defaults.end()) {
    std::string names;
    for (const auto& a : ablation_axes()) names += (names.empty() ? "" : ", ") + a;
    throw ConfigError("unknown ablation axis '" + axis + "' (expected one of " + names + ")");
  }
  const std::vector<std::string>& grid = values ? *values : it->second;
  if (grid.empty()) {
    throw ConfigError("ablation grid for axis " + axis + " is empty");
  }
  std::vector<AblationCell> cells;
  for (const auto& v : grid) {
    AblationCell cell{v, base};
    ExperimentConfig& c = cell.config;
    if (axis == "components") {
      if (v == "moe") {
        c.modulator.hdr_enabled = false;
        c.modulator.hgm_enabled = false;
      } else if (v == "hdr") {
        c.modulator.hdr_enabled = true;
        c.modulator.hgm_enabled = false;
      } else if (v == "hgm") {
        c.modulator.hdr_enabled = false;
        c.modulator.hgm_enabled = true;
      } else if (v == "both") {
        c.modulator.hdr_enabled = true;
        c.modulator.hgm_enabled = true;
      } else {
        throw ConfigError("axis components: unknown cell '" + v + "' (moe, hdr, hgm, both)");
      }
    } else if (axis == "n_experts") {
      c.pool.num_experts = parse_count(axis, v);
    } else if (axis == "prompt_length") {
      c.pool.prompt_length = parse_count(axis, v);
    } else if (axis == "psi_variant") {
      c.modulator.penalty = parse_penalty_variant(v);
    } else if (axis == "gamma_variant") {
      c.modulator.decay = parse_decay_variant(v);
    } else if (axis == "delta") {
      c.modulator.delta = parse_double(axis, v);
    } else if (axis == "alpha") {
      c.modulator.alpha_decay = parse_double(axis, v);
    }
    try {
      c.validate();
    } catch (const Error& e) {
      throw ConfigError("axis " + axis + " cell '" + v + "': " + e.what());
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

AblationResult run_ablation(const ExperimentConfig& cfg, const std::string& axis,
                            const std::optional<std::vector<std::string>>& values,
                            const fs::path& out, std::size_t jobs, const LogFn& log) {
  const auto cells = ablation_grid(cfg, axis, values);
  fs::create_directories(out);
  BackboneCache cache;
  const std::size_t n_seeds = cfg.seeds.size();
  std::vector<std::vector<SeedResult>> results(cells.size(), std::vector<SeedResult>(n_seeds));
  // Seed-major order so each seed's backbone is pretrained once, up front.
  parallel_for(cells.size() * n_seeds, jobs, [&](std::size_t job) {
    const std::size_t s = job / cells.size();
    const std::size_t c = job % cells.size();
    const auto seed = cfg.seeds[s];
    const LogFn cell_log = log ? LogFn([&, label = cells[c].label](const std::string& m) {
      log("[" + axis + "=" + label + "] " + m);
    })
                               : LogFn();
    results[c][s] = run_seed(cells[c].config, seed,
                             out / cells[c].label / ("seed_" + std::to_string(seed)), cache,
                             cell_log);
  });

  AblationResult ar;
  ar.axis = axis;
  std::ofstream csv(out / "ablation.csv");
  if (!csv) throw Error("cannot open " + (out / "ablation.csv").string());
  csv << "axis,cell,seed,faa,caa,fm,utilization_variance\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  for (std::size_t c = 0; c < cells.size(); ++c) {
    RunSummary s = summarize(results[c]);
    write_summary(out / cells[c].label / "summary.json", s);
    {
      std::ofstream cj(out / cells[c].label / "config.json");
      cj << config_to_json(cells[c].config);
    }
    for (const auto& r : s.seeds) {
      csv << axis << ',' << cells[c].label << ',' << r.seed << ',' << format_number(r.faa) << ','
          << format_number(r.caa) << ',' << opt(r.fm) << ','
          << format_number(r.utilization.mean_variance()) << '\n';
    }
    csv << axis << ',' << cells[c].label << ",mean," << format_number(s.faa.mean) << ','
        << format_number(s.caa.mean) << ',' << (s.fm.count ? format_number(s.fm.mean) : "")
        << ',' << format_number(s.utilization_variance.mean) << '\n';
    csv << axis << ',' << cells[c].label << ",std," << opt(s.faa.std) << ',' << opt(s.caa.std)
        << ',' << opt(s.fm.std) << ',' << opt(s.utilization_variance.std) << '\n';
    ar.labels.push_back(cells[c].label);
    ar.cells.push_back(std::move(s));
  }
  return ar;
}

}  // namespace hashcl
