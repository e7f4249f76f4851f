#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "hashcl/matrix.hpp"

namespace hashcl {

struct LearnerState;
struct EncoderWeights;

inline constexpr char kCheckpointMagic[] = "HASHCL1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Matrix value;

  bool operator==(const NamedTensor&) const = default;
};

/// Little-endian: magic (7 bytes), version u32, tensor count u64, then per
/// tensor {name length u32, name bytes, rows u64, cols u64, rows*cols f64}.
void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

std::vector<NamedTensor> backbone_tensors(const EncoderWeights& weights);
/// Backbone, prompts, routers (weights and frozen penalties), heads,
/// prototypes and ledger counts of a learner.
std::vector<NamedTensor> learner_tensors(const LearnerState& state);

}  // namespace hashcl
