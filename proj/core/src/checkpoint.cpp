#include "hashcl/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "hashcl/errors.hpp"
#include "hashcl/training.hpp"

namespace hashcl {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw DataError(std::string("checkpoint truncated while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

constexpr std::size_t kMagicLength = sizeof(kCheckpointMagic) - 1;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

std::vector<double> row_values(std::span<const double> v) { return {v.begin(), v.end()}; }

Matrix row_matrix(std::span<const double> v) { return Matrix::row_vector(row_values(v)); }

Matrix count_matrix(std::span<const std::uint64_t> counts) {
  Matrix m(1, counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) m(0, i) = static_cast<double>(counts[i]);
  return m;
}

}  // namespace

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write(kCheckpointMagic, kMagicLength);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, tensors.size());
  for (const auto& t : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint64_t>(out, t.value.rows());
    put<std::uint64_t>(out, t.value.cols());
    for (double v : t.value.values()) put<double>(out, v);
  }
  if (!out) {
    throw Error("failed to write checkpoint");
  }
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  char magic[kMagicLength];
  if (!in.read(magic, kMagicLength) || std::memcmp(magic, kCheckpointMagic, kMagicLength) != 0) {
    throw DataError("not a checkpoint: bad magic");
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get<std::uint64_t>(in, "tensor count");
  std::vector<NamedTensor> tensors;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = get<std::uint32_t>(in, "name length");
    t.name.resize(len);
    if (!in.read(t.name.data(), len)) {
      throw DataError("checkpoint truncated while reading a tensor name");
    }
    const auto rows = get<std::uint64_t>(in, "rows");
    const auto cols = get<std::uint64_t>(in, "cols");
    if (cols != 0 && rows > kMaxElements / cols) {
      throw DataError("checkpoint tensor " + t.name + " is implausibly large");
    }
    t.value = Matrix(rows, cols);
    for (double& v : t.value.values()) v = get<double>(in, "tensor data");
    tensors.push_back(std::move(t));
  }
  return tensors;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  write_checkpoint(out, tensors);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  return read_checkpoint(in);
}

std::vector<NamedTensor> backbone_tensors(const EncoderWeights& weights) {
  std::vector<NamedTensor> out;
  out.push_back({"encoder.projection", weights.projection});
  for (const auto& [name, m] : weights.trainable()) out.push_back({name, *m});
  return out;
}

std::vector<NamedTensor> learner_tensors(const LearnerState& state) {
  std::vector<NamedTensor> out = backbone_tensors(*state.backbone);
  for (std::size_t slot = 0; slot < state.pools.size(); ++slot) {
    for (std::size_t e = 0; e < state.pools[slot].num_experts(); ++e) {
      out.push_back({expert_param_name(slot, e), state.pools[slot].prompt(e)});
    }
  }
  for (const auto& r : state.routers) {
    for (std::size_t slot = 0; slot < r.weights.size(); ++slot) {
      out.push_back({router_param_name(r.task, slot), r.weights[slot]});
    }
    for (std::size_t slot = 0; slot < r.penalties.size(); ++slot) {
      out.push_back({router_param_name(r.task, slot) + ".penalty", row_matrix(r.penalties[slot])});
    }
  }
  out.push_back({"classifier.w", state.heads.classifier_w});
  out.push_back({"classifier.b", state.heads.classifier_b});
  out.push_back({"task.w", state.heads.task_w});
  out.push_back({"task.b", state.heads.task_b});
  Matrix order(1, state.class_order.size());
  for (std::size_t i = 0; i < state.class_order.size(); ++i) {
    order(0, i) = static_cast<double>(state.class_order[i]);
  }
  out.push_back({"classes", order});
  for (const auto* space : {&state.uninstructed, &state.instructed}) {
    const std::string tag = space == &state.instructed ? "instructed" : "uninstructed";
    for (const auto& [c, p] : *space) {
      const std::string base = "prototype." + tag + "." + std::to_string(c);
      out.push_back({base + ".mean", row_matrix(p.mean)});
      out.push_back({base + ".variance", row_matrix(p.variance)});
    }
  }
  for (std::size_t l = 0; l < state.ledger.num_layers(); ++l) {
    out.push_back({"ledger." + std::to_string(l) + ".counts", count_matrix(state.ledger.counts(l))});
    out.push_back({"ledger." + std::to_string(l) + ".frozen",
                   count_matrix(state.ledger.frozen_counts(l))});
  }
  return out;
}

}  // namespace hashcl
