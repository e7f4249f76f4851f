#include <gtest/gtest.h>

#include <filesystem>
#include <memory>
#include <set>
#include <sstream>

#include "hashcl/checkpoint.hpp"
#include "hashcl/errors.hpp"
#include "hashcl/synth.hpp"
#include "hashcl/training.hpp"

using namespace hashcl;

TEST(Checkpoint, HeaderLayout) {
  std::ostringstream out;
  write_checkpoint(out, {{"a", Matrix::from_rows({{1.5}})}});
  const std::string bytes = out.str();
  EXPECT_EQ(bytes.substr(0, 7), "HASHCL1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 1u);  // version, little-endian
  EXPECT_EQ(bytes.size(), 7u + 4u + 8u + 4u + 1u + 8u + 8u + 8u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(3);
  std::vector<NamedTensor> tensors{
      {"empty", Matrix()},
      {"w", rng.normal_matrix(3, 5, 1.0)},
      {"tiny", Matrix::from_rows({{5e-324, -0.0, 1e308}})},
  };
  std::stringstream buf;
  write_checkpoint(buf, tensors);
  const auto back = read_checkpoint(buf);
  EXPECT_EQ(back, tensors);
  std::ostringstream again;
  write_checkpoint(again, back);
  std::ostringstream first;
  write_checkpoint(first, tensors);
  EXPECT_EQ(again.str(), first.str());
}

TEST(Checkpoint, CorruptInputIsADataError) {
  std::stringstream bad("NOTACKPT");
  EXPECT_THROW(read_checkpoint(bad), DataError);
  std::ostringstream out;
  write_checkpoint(out, {{"w", Matrix(2, 2, 1.0)}});
  std::stringstream truncated(out.str().substr(0, out.str().size() - 3));
  EXPECT_THROW(read_checkpoint(truncated), DataError);
}

TEST(Checkpoint, LearnerStateRoundTripsThroughAFile) {
  EncoderConfig enc;
  enc.n_layers = 1;
  enc.dim = 8;
  enc.n_heads = 2;
  enc.tokens = 2;
  enc.raw_dim = 4;
  enc.injected_layers = {0};
  Rng rng(1);
  auto backbone = std::make_shared<const EncoderWeights>(EncoderWeights::init(enc, rng));
  DataConfig data;
  data.tasks = 2;
  data.classes_per_task = 2;
  data.train_per_class = 6;
  data.test_per_class = 2;
  const auto stream = generate_stream(data, 4, 1);
  PoolConfig pool;
  pool.num_experts = 3;
  pool.prompt_length = 2;
  TrainConfig train;
  train.epochs = 1;
  train.pseudo_per_class = 4;
  ContinualLearner learner(enc, backbone, pool, ModulatorConfig{}, train, 2);
  for (const auto& t : stream.tasks) learner.train_task(t);

  const auto tensors = learner_tensors(learner.state());
  const auto path = std::filesystem::temp_directory_path() / "hashcl_ckpt_test.bin";
  save_checkpoint(path, tensors);
  EXPECT_EQ(load_checkpoint(path), tensors);
  std::filesystem::remove(path);

  std::set<std::string> names;
  for (const auto& t : tensors) names.insert(t.name);
  EXPECT_TRUE(names.count("encoder.projection"));
  EXPECT_TRUE(names.count("classes"));
  EXPECT_TRUE(names.count("prototype.instructed.3.mean"));
  EXPECT_TRUE(names.count("prototype.uninstructed.0.variance"));
  EXPECT_TRUE(names.count("ledger.0.counts"));
  EXPECT_EQ(names.size(), tensors.size());
}

TEST(Checkpoint, MissingFileRaises) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/ckpt.bin"), Error);
}
