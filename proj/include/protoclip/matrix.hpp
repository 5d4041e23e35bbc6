#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "protoclip/error.hpp"

namespace protoclip {

/// Dense row-major float64 matrix. The universal numeric carrier.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not equal " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Matrix(1, n, std::move(values));
  }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  Matrix row_copy(std::size_t r) const {
    auto s = row_span(r);
    return Matrix(1, cols_, std::vector<double>(s.begin(), s.end()));
  }

  bool all_finite() const noexcept {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw NumericError(std::string(what) + ": non-finite input");
}

// Eager (tape-free) kernels shared by the tape ops and the inference path.

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch: " + a.shape_string() + " x " +
                     b.shape_string());
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row_span(i);
    for (std::size_t t = 0; t < a.cols(); ++t) {
      const double av = a(i, t);
      if (av == 0.0) continue;
      auto brow = b.row_span(t);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// a · bᵀ without materializing the transpose.
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt shape mismatch: " + a.shape_string() + " x " +
                     b.shape_string() + "^T");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row_span(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row_span(j);
      double s = 0.0;
      for (std::size_t t = 0; t < a.cols(); ++t) s += arow[t] * brow[t];
      c(i, j) = s;
    }
  }
  return c;
}

/// aᵀ · b without materializing the transpose.
inline Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_at shape mismatch: " + a.shape_string() + "^T x " +
                     b.shape_string());
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t t = 0; t < a.rows(); ++t) {
    auto arow = a.row_span(t);
    auto brow = b.row_span(t);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      auto crow = c.row_span(i);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot length mismatch: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// Guard below which a vector is treated as having no direction.
inline constexpr double kNormEpsilon = 1e-12;

/// Scales a 1×d row to unit Euclidean norm.
inline Matrix l2_normalize(const Matrix& v) {
  if (v.rows() != 1) throw ShapeError("l2_normalize expects 1xd, got " + v.shape_string());
  require_finite(v, "l2_normalize");
  const double n = norm2(v.data());
  if (n <= kNormEpsilon) {
    throw NumericError("l2_normalize: near-zero norm " + std::to_string(n));
  }
  Matrix out = v;
  for (double& x : out.data()) x /= n;
  return out;
}

/// Rounds every entry through float32, matching what a checkpoint stores.
inline Matrix round_to_float32(const Matrix& m) {
  Matrix out = m;
  for (double& x : out.data()) x = static_cast<double>(static_cast<float>(x));
  return out;
}

}  // namespace protoclip
