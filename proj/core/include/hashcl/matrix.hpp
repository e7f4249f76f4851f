#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hashcl {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  void fill(double value);
  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Products accumulate over the inner dimension from left to right.
Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// a += scale * b
void add_scaled(Matrix& a, const Matrix& b, double scale = 1.0);
Matrix scaled(const Matrix& a, double scale);

// Rows [begin, begin + count).
Matrix row_slice(const Matrix& a, std::size_t begin, std::size_t count);
Matrix vstack(const Matrix& top, const Matrix& bottom);
std::vector<double> column_mean(const Matrix& a);

double frobenius_squared(const Matrix& a);
double dot(std::span<const double> a, std::span<const double> b);

/// Numerically stable softmax of v / temperature; throws ArgumentError on empty input.
std::vector<double> softmax(std::span<const double> v, double temperature = 1.0);
double log_sum_exp(std::span<const double> v);

bool all_finite(std::span<const double> values);
void require_finite(const Matrix& m, std::string_view what);
void require_finite(std::span<const double> values, std::string_view what);

}  // namespace hashcl
