#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hashcl/encoder.hpp"
#include "hashcl/history.hpp"
#include "hashcl/synth.hpp"
#include "hashcl/training.hpp"

namespace hashcl {

inline constexpr int kConfigSchema = 1;

struct ExperimentConfig {
  EncoderConfig encoder;
  PoolConfig pool;
  ModulatorConfig modulator;
  TrainConfig train;
  DataConfig data;
  PretrainConfig pretrain;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string out_dir = "runs/default";

  /// Checks every module's preconditions plus the cross-module ones.
  void validate() const;
};

/// Parses a flat JSON document. Unknown keys, wrong types and invalid values
/// raise ConfigError naming the field. Missing keys keep their defaults.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& cfg);

/// "1,2,3" -> {1, 2, 3}; rejects empty lists and non-numeric entries.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

/// Replaces the seed list with HASHCL_SEED when that variable is set.
void apply_environment(ExperimentConfig& cfg);

}  // namespace hashcl
