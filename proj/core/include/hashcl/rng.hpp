#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

#include "hashcl/matrix.hpp"

namespace hashcl {

/// Seeded generator with named sub-streams. split() never advances the parent,
/// so the stream a component sees depends only on (seed, stream path).
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  Rng split(std::string_view stream) const;
  Rng split(std::uint64_t stream) const;

  std::uint64_t seed() const noexcept { return seed_; }

  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t index(std::size_t n);

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev);
  Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace hashcl
