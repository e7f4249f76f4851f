#include "hashcl/optim.hpp"

#include <cmath>

#include "hashcl/errors.hpp"

namespace hashcl {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + name + "'");
}

Optimizer::Optimizer(OptimizerKind kind, double beta1, double beta2, double eps)
    : kind_(kind), beta1_(beta1), beta2_(beta2), eps_(eps) {}

Matrix Optimizer::update(const std::string& name, const Matrix& grad, double lr) {
  Matrix delta(grad.rows(), grad.cols());
  if (kind_ == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
      delta.values()[i] = -lr * grad.values()[i];
    }
    return delta;
  }
  auto& s = state_[name];
  if (s.t == 0) {
    s.m = Matrix(grad.rows(), grad.cols());
    s.v = Matrix(grad.rows(), grad.cols());
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad.values()[i];
    double& m = s.m.values()[i];
    double& v = s.v.values()[i];
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g * g;
    delta.values()[i] = -lr * (m / c1) / (std::sqrt(v / c2) + eps_);
  }
  return delta;
}

void Optimizer::step(const std::string& name, Matrix& param, const Matrix& grad, double lr) {
  if (!param.same_shape(grad)) {
    throw DimensionError("optimizer step on '" + name + "': parameter " + param.shape_string() +
                         " vs gradient " + grad.shape_string());
  }
  add_scaled(param, update(name, grad, lr));
  require_finite(param, name);
}

}  // namespace hashcl
