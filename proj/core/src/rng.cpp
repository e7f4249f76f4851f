#include "hashcl/rng.hpp"

#include "hashcl/errors.hpp"

namespace hashcl {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (b + 0x632be59bd9b4e019ULL));
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::split(std::string_view stream) const { return Rng(mix_seed(seed_, fnv1a(stream))); }

Rng Rng::split(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double Rng::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) {
    throw ArgumentError("Rng::index over an empty range");
  }
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

Matrix Rng::normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.values()) {
    v = dist(engine_);
  }
  return m;
}

Matrix Rng::uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi) {
  Matrix m(rows, cols);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : m.values()) {
    v = dist(engine_);
  }
  return m;
}

}  // namespace hashcl
