#include "hashcl/grad.hpp"

#include <algorithm>
#include <cmath>

#include "hashcl/errors.hpp"

namespace hashcl {

void GradTape::accumulate(const std::string& name, const Matrix& grad) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    grads_.emplace(name, grad);
    return;
  }
  if (!it->second.same_shape(grad)) {
    throw DimensionError("gradient for '" + name + "' has shape " + grad.shape_string() +
                         ", expected " + it->second.shape_string());
  }
  add_scaled(it->second, grad);
}

void GradTape::accumulate_row(const std::string& name, std::size_t rows, std::size_t cols,
                              std::size_t r, std::span<const double> grad, double scale) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    it = grads_.emplace(name, Matrix(rows, cols)).first;
  }
  Matrix& g = it->second;
  if (g.rows() != rows || g.cols() != cols || grad.size() != cols || r >= rows) {
    throw DimensionError("row gradient for '" + name + "' does not fit " + g.shape_string());
  }
  auto dst = g.row(r);
  for (std::size_t c = 0; c < cols; ++c) {
    dst[c] += scale * grad[c];
  }
}

const Matrix& GradTape::at(const std::string& name) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    throw StateError("no gradient recorded for '" + name + "'");
  }
  return it->second;
}

Matrix& GradTape::at(const std::string& name) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    throw StateError("no gradient recorded for '" + name + "'");
  }
  return it->second;
}

Matrix GradTape::get_or_zero(const std::string& name, std::size_t rows, std::size_t cols) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    return Matrix(rows, cols);
  }
  return it->second;
}

void GradTape::scale(const std::string& name, double factor) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    return;
  }
  for (double& v : it->second.values()) {
    v *= factor;
  }
}

namespace {

double central_difference(const ScalarLoss& loss, Matrix& probe, std::size_t flat, double step) {
  const double original = probe.values()[flat];
  probe.values()[flat] = original + step;
  const double up = loss(probe);
  probe.values()[flat] = original - step;
  const double down = loss(probe);
  probe.values()[flat] = original;
  if (!std::isfinite(up) || !std::isfinite(down)) {
    throw NumericError("non-finite loss at perturbed point (entry " + std::to_string(flat) + ")");
  }
  return (up - down) / (2.0 * step);
}

}  // namespace

Matrix finite_difference_gradient(const ScalarLoss& loss, const Matrix& param, double step) {
  if (!(step > 0.0)) {
    throw ArgumentError("finite-difference step must be positive");
  }
  Matrix probe = param;
  Matrix grad(param.rows(), param.cols());
  for (std::size_t i = 0; i < param.size(); ++i) {
    grad.values()[i] = central_difference(loss, probe, i, step);
  }
  return grad;
}

std::vector<double> finite_difference_entries(const ScalarLoss& loss, const Matrix& param,
                                              const std::vector<EntryIndex>& entries,
                                              double step) {
  if (!(step > 0.0)) {
    throw ArgumentError("finite-difference step must be positive");
  }
  Matrix probe = param;
  std::vector<double> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    if (e.row >= param.rows() || e.col >= param.cols()) {
      throw DimensionError("finite-difference entry out of range for " + param.shape_string());
    }
    out.push_back(central_difference(loss, probe, e.row * param.cols() + e.col, step));
  }
  return out;
}

GradientComparison compare_gradients(std::span<const double> analytic, std::span<const double> fd,
                                     double floor) {
  if (analytic.size() != fd.size()) {
    throw DimensionError("compare_gradients: length mismatch");
  }
  GradientComparison result;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    if (std::abs(fd[i]) <= floor) {
      continue;
    }
    const double denom = std::max(std::abs(analytic[i]), std::abs(fd[i]));
    result.max_relative_error = std::max(result.max_relative_error, std::abs(analytic[i] - fd[i]) / denom);
    ++result.checked;
  }
  return result;
}

}  // namespace hashcl
