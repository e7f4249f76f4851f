#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <vector>

#include "hashcl/dataset.hpp"
#include "hashcl/encoder.hpp"

namespace hashcl {

struct DataConfig {
  std::size_t tasks = 5;
  std::size_t classes_per_task = 4;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double rho = 0.3;             // overlap of each task's means with the previous task
  double mean_radius = 3.0;     // class means lie on a sphere of this radius
  double offset_scale = 0.3;    // fresh per-class offset mixed into related means
  double noise_std = 1.0;
  std::size_t pretrain_classes = 8;
  std::size_t pretrain_train_per_class = 200;
  std::size_t pretrain_test_per_class = 100;
  double pretrain_radius = 4.0;

  void validate() const;
};

/// Generator description of one task: the class means every sample is drawn around.
struct TaskSpec {
  std::size_t task = 0;
  std::vector<std::size_t> classes;
  std::vector<std::vector<double>> means;  // parallel to classes
  std::optional<std::size_t> related_task;
  double noise_std = 1.0;
};

struct Stream {
  std::vector<TaskSpec> specs;
  std::vector<TaskData> tasks;
};

/// Class ids are t * classes_per_task + j. Task t > 0 is related to task t - 1:
/// its means mix the previous means (weight rho) with fresh directions.
Stream generate_stream(const DataConfig& cfg, std::size_t raw_dim, std::uint64_t seed);

/// Mean over classes j of cos(mean(t, j), mean(related(t), j)).
double related_mean_cosine(const Stream& stream, std::size_t task);

/// Generic classification data for backbone pretraining. Class ids start at
/// `first_class`, which must lie above every stream class.
TaskData generate_pretrain_set(const DataConfig& cfg, std::size_t raw_dim, std::size_t first_class,
                               std::uint64_t seed);

struct PretrainConfig {
  // Linear-probe warmup: only the head trains, so the joint stage starts from
  // a fitted head and distorts the random features less.
  std::size_t head_epochs = 5;
  double head_lr = 1e-2;
  std::size_t max_epochs = 30;  // joint epochs; at least one always runs
  std::size_t batch_size = 32;
  double lr = 3e-4;
  double target_accuracy = 0.9;
};

struct PretrainResult {
  std::shared_ptr<const EncoderWeights> weights;
  double heldout_accuracy = 0.0;
  std::size_t epochs = 0;
};

/// Fits a throwaway linear head on the initial features, then trains encoder
/// and head jointly with Adam until the held-out split exceeds the target
/// accuracy (checked after each joint epoch) or the epoch budget runs out.
/// The returned weights are immutable.
PretrainResult pretrain_backbone(const EncoderConfig& cfg, const TaskData& data,
                                 const PretrainConfig& pcfg, std::span<const TaskData> stream,
                                 std::uint64_t seed);

/// One row per sample: split,task,class,x0..x{n-1}.
void write_stream_csv(std::ostream& out, const Stream& stream);

}  // namespace hashcl
