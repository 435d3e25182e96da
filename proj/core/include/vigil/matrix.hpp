#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "vigil/errors.hpp"

namespace vigil {

class SeededRng;

// Dense row-major matrix of 64-bit reals. The one tensor type in the
// project; vectors are 1 x n matrices. Values are immutable once an
// operation returns them, so sharing across threads read-only is safe.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols);  // zero-filled
  Matrix(int rows, int cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix zeros(int rows, int cols) { return Matrix(rows, cols); }
  static Matrix full(int rows, int cols, double value);
  static Matrix identity(int n);
  static Matrix row(std::vector<double> values);
  // Entries drawn i.i.d. normal(0, sd).
  static Matrix randn(int rows, int cols, SeededRng& rng, double sd = 1.0);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& storage() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_str() const;

  bool all_finite() const;
  // Throws NumericError naming `what` if any entry is NaN/Inf.
  void ensure_finite(const char* what) const;

  bool operator==(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// Throws ShapeError with both shapes spelled out unless a and b match.
void require_same_shape(const Matrix& a, const Matrix& b, const char* op);

}  // namespace vigil
