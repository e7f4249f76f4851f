#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hashcl/matrix.hpp"

namespace hashcl {

/// Accumulated gradients keyed by parameter name. Accumulation is additive, so
/// separate loss terms can contribute to the same parameter independently.
class GradTape {
 public:
  void accumulate(const std::string& name, const Matrix& grad);
  // Adds scale * grad[r, :] into row r of the stored gradient (allocating rows x cols on first use).
  void accumulate_row(const std::string& name, std::size_t rows, std::size_t cols, std::size_t r,
                      std::span<const double> grad, double scale = 1.0);

  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);
  // Zero matrix of the given shape when the parameter received no gradient.
  Matrix get_or_zero(const std::string& name, std::size_t rows, std::size_t cols) const;
  void scale(const std::string& name, double factor);

  const std::map<std::string, Matrix>& entries() const noexcept { return grads_; }
  void clear() { grads_.clear(); }

 private:
  std::map<std::string, Matrix> grads_;
};

using ScalarLoss = std::function<double(const Matrix&)>;

/// Central differences (L(theta + h) - L(theta - h)) / 2h for every entry of param.
Matrix finite_difference_gradient(const ScalarLoss& loss, const Matrix& param, double step = 1e-5);

struct EntryIndex {
  std::size_t row;
  std::size_t col;
};

/// Same as above on a subset of entries; returns one derivative per requested entry.
std::vector<double> finite_difference_entries(const ScalarLoss& loss, const Matrix& param,
                                              const std::vector<EntryIndex>& entries,
                                              double step = 1e-5);

struct GradientComparison {
  double max_relative_error = 0.0;
  std::size_t checked = 0;  // entries with |fd| above the floor
};

// Element-wise |a - f| / max(|a|, |f|) over entries with |f| > floor.
GradientComparison compare_gradients(std::span<const double> analytic, std::span<const double> fd,
                                     double floor = 1e-8);

}  // namespace hashcl
