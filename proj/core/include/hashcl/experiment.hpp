#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "hashcl/config.hpp"
#include "hashcl/metrics.hpp"
#include "hashcl/synth.hpp"

namespace hashcl {

using LogFn = std::function<void(const std::string&)>;

/// Pretrained backbones keyed by seed and the settings that shape them, so
/// ablation cells of one seed share a single pretraining run.
class BackboneCache {
 public:
  PretrainResult get(const ExperimentConfig& cfg, std::uint64_t seed, const Stream& stream);

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<std::once_flag>> flags_;
  std::map<std::string, PretrainResult> results_;
};

struct SeedResult {
  std::uint64_t seed = 0;
  AccuracyMatrix accuracy;
  double faa = 0.0;
  double caa = 0.0;
  std::optional<double> fm;
  UtilizationReport utilization;
  double pretrain_accuracy = 0.0;
};

/// Pretrain, train every task in order, evaluate after each one. Writes
/// metrics.csv, events.jsonl and checkpoint.bin into `dir`.
SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                    const std::filesystem::path& dir, BackboneCache& backbones,
                    const LogFn& log = {});

struct Aggregate {
  double mean = 0.0;
  std::optional<double> std;  // sample standard deviation; absent for a single value
  std::size_t count = 0;
};

Aggregate aggregate(const std::vector<double>& values);

struct RunSummary {
  std::vector<SeedResult> seeds;
  Aggregate faa, caa, fm, utilization_variance;
};

/// Runs every seed (in parallel up to `jobs`) into out/seed_<s>/ and writes
/// out/summary.json and out/config.json.
RunSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                          std::size_t jobs, const LogFn& log = {},
                          BackboneCache* backbones = nullptr);

struct AblationCell {
  std::string label;
  ExperimentConfig config;
};

/// Axis names: components, n_experts, prompt_length, psi_variant,
/// gamma_variant, delta, alpha. `values` replaces the default grid.
std::vector<AblationCell> ablation_grid(const ExperimentConfig& base, const std::string& axis,
                                        const std::optional<std::vector<std::string>>& values);
const std::vector<std::string>& ablation_axes();

struct AblationResult {
  std::string axis;
  std::vector<std::string> labels;
  std::vector<RunSummary> cells;  // parallel to labels
};

/// Runs the grid into out/<cell>/ and writes out/ablation.csv.
AblationResult run_ablation(const ExperimentConfig& cfg, const std::string& axis,
                            const std::optional<std::vector<std::string>>& values,
                            const std::filesystem::path& out, std::size_t jobs,
                            const LogFn& log = {});

/// "%.9g"
std::string format_number(double value);

}  // namespace hashcl
