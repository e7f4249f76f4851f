#include "hashcl/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hashcl/errors.hpp"

namespace hashcl {

namespace {

[[noreturn]] void throw_shape(std::string_view op, const Matrix& a, const Matrix& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                       b.shape_string());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw DimensionError("ragged row in matrix literal");
    }
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = 1.0;
  }
  return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::string Matrix::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw_shape("matmul", a, b);
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out_row[j] += aik * b_row[j];
      }
    }
  }
  require_finite(out, "matmul");
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw_shape("matmul_nt", a, b);
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) {
        acc += a_row[k] * b_row[k];
      }
      out(i, j) = acc;
    }
  }
  require_finite(out, "matmul_nt");
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw_shape("matmul_tn", a, b);
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto a_row = a.row(k);
    const auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out_row[j] += aki * b_row[j];
      }
    }
  }
  require_finite(out, "matmul_tn");
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(j, i) = a(i, j);
    }
  }
  return out;
}

void add_scaled(Matrix& a, const Matrix& b, double scale) {
  if (!a.same_shape(b)) {
    throw_shape("add_scaled", a, b);
  }
  auto dst = a.values();
  const auto src = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] += scale * src[i];
  }
}

Matrix scaled(const Matrix& a, double scale) {
  Matrix out = a;
  for (double& v : out.values()) {
    v *= scale;
  }
  return out;
}

Matrix row_slice(const Matrix& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) {
    throw DimensionError("row_slice: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " + a.shape_string());
  }
  const auto src = a.values().subspan(begin * a.cols(), count * a.cols());
  return Matrix(count, a.cols(), std::vector<double>(src.begin(), src.end()));
}

Matrix vstack(const Matrix& top, const Matrix& bottom) {
  if (top.cols() != bottom.cols()) {
    throw_shape("vstack", top, bottom);
  }
  std::vector<double> data(top.values().begin(), top.values().end());
  data.insert(data.end(), bottom.values().begin(), bottom.values().end());
  return Matrix(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

std::vector<double> column_mean(const Matrix& a) {
  std::vector<double> mean(a.cols(), 0.0);
  if (a.rows() == 0) {
    return mean;
  }
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) {
      mean[c] += row[c];
    }
  }
  const double inv = 1.0 / static_cast<double>(a.rows());
  for (double& v : mean) {
    v *= inv;
  }
  return mean;
}

double frobenius_squared(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.values()) {
    acc += v * v;
  }
  return acc;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += a[i] * b[i];
  }
  return acc;
}

std::vector<double> softmax(std::span<const double> v, double temperature) {
  if (v.empty()) {
    throw ArgumentError("softmax of an empty vector");
  }
  if (!(temperature > 0.0)) {
    throw ArgumentError("softmax temperature must be positive");
  }
  require_finite(v, "softmax input");
  const double peak = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - peak) / temperature);
    total += out[i];
  }
  for (double& x : out) {
    x /= total;
  }
  return out;
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) {
    throw ArgumentError("log_sum_exp of an empty vector");
  }
  const double peak = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) {
    total += std::exp(x - peak);
  }
  return peak + std::log(total);
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

void require_finite(const Matrix& m, std::string_view what) { require_finite(m.values(), what); }

void require_finite(std::span<const double> values, std::string_view what) {
  if (!all_finite(values)) {
    throw NumericError("non-finite value in " + std::string(what));
  }
}

}  // namespace hashcl
