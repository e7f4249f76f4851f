#pragma once

#include <map>
#include <string>

#include "hashcl/matrix.hpp"

namespace hashcl {

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& name);

/// Stateless SGD or per-parameter Adam. `update` returns the displacement that
/// `step` adds to the parameter, so callers can inspect it.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::sgd, double beta1 = 0.9,
                     double beta2 = 0.999, double eps = 1e-8);

  Matrix update(const std::string& name, const Matrix& grad, double lr);
  void step(const std::string& name, Matrix& param, const Matrix& grad, double lr);
  void reset() { state_.clear(); }

  OptimizerKind kind() const noexcept { return kind_; }

 private:
  struct Moments {
    Matrix m, v;
    long t = 0;
  };
  OptimizerKind kind_;
  double beta1_, beta2_, eps_;
  std::map<std::string, Moments> state_;
};

}  // namespace hashcl
