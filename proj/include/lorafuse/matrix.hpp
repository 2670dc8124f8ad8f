// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include "lorafuse/error.hpp"

namespace lorafuse {

/// Dense row-major matrix of doubles. The storage length always equals
/// rows() * cols().
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
    if (data_.size() != rows * cols) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(rows, cols));
    }
  }

  /// Row-list literal, e.g. Matrix{{1, 2}, {3, 4}}.
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    if (rows_ == 0 || cols_ == 0) throw ShapeError("matrix literal must be non-empty");
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
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

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  static std::string shape_string(std::size_t rows, std::size_t cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class Axis { rows, cols };

inline Matrix matmul(const Matrix& lhs, const Matrix& rhs) {
  if (lhs.cols() != rhs.rows()) {
    throw ShapeError("matmul shape mismatch: " + lhs.shape() + " x " + rhs.shape());
  }
  Matrix out(lhs.rows(), rhs.cols());
  const std::size_t inner = lhs.cols();
  for (std::size_t i = 0; i < lhs.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < inner; ++k) {
      const double a = lhs(i, k);
      const auto rhs_row = rhs.row(k);
      for (std::size_t j = 0; j < rhs.cols(); ++j) out_row[j] += a * rhs_row[j];
    }
  }
  return out;
}

/// lhs * rhs^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& lhs, const Matrix& rhs) {
  if (lhs.cols() != rhs.cols()) {
    throw ShapeError("matmul_nt shape mismatch: " + lhs.shape() + " x " + rhs.shape() + "^T");
  }
  Matrix out(lhs.rows(), rhs.rows());
  for (std::size_t i = 0; i < lhs.rows(); ++i) {
    const auto a = lhs.row(i);
    for (std::size_t j = 0; j < rhs.rows(); ++j) {
      const auto b = rhs.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
      out(i, j) = acc;
    }
  }
  return out;
}

/// lhs^T * rhs without materializing the transpose.
inline Matrix matmul_tn(const Matrix& lhs, const Matrix& rhs) {
  if (lhs.rows() != rhs.rows()) {
    throw ShapeError("matmul_tn shape mismatch: " + lhs.shape() + "^T x " + rhs.shape());
  }
  Matrix out(lhs.cols(), rhs.cols());
  for (std::size_t k = 0; k < lhs.rows(); ++k) {
    const auto a = lhs.row(k);
    const auto b = rhs.row(k);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double av = a[i];
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.size(); ++j) out_row[j] += av * b[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

/// alpha * x + y, elementwise.
inline Matrix axpy(double alpha, const Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) throw ShapeError("axpy shape mismatch: " + x.shape() + " vs " + y.shape());
  Matrix out = y;
  auto o = out.data();
  auto xs = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += alpha * xs[i];
  return out;
}

inline Matrix add(const Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) throw ShapeError("add shape mismatch: " + x.shape() + " vs " + y.shape());
  Matrix out = x;
  auto o = out.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += ys[i];
  return out;
}

inline Matrix scale(double s, const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v *= s;
  return out;
}

inline Matrix concat(std::span<const Matrix> parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat of an empty list");
  const bool along_cols = axis == Axis::cols;
  const std::size_t fixed = along_cols ? parts.front().rows() : parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t off_axis = along_cols ? p.rows() : p.cols();
    if (off_axis != fixed) {
      throw ShapeError("concat along " + std::string(along_cols ? "cols" : "rows") +
                       " needs matching " + (along_cols ? "rows" : "cols") + ", got " +
                       parts.front().shape() + " and " + p.shape());
    }
    total += along_cols ? p.cols() : p.rows();
  }
  Matrix out = along_cols ? Matrix(fixed, total) : Matrix(total, fixed);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) {
        if (along_cols)
          out(i, offset + j) = p(i, j);
        else
          out(offset + i, j) = p(i, j);
      }
    offset += along_cols ? p.cols() : p.rows();
  }
  return out;
}

inline Matrix concat(std::initializer_list<Matrix> parts, Axis axis) {
  return concat(std::span<const Matrix>(parts.begin(), parts.size()), axis);
}

/// Contiguous block [begin, begin + count) along the given axis.
inline Matrix slice(const Matrix& m, Axis axis, std::size_t begin, std::size_t count) {
  const std::size_t extent = axis == Axis::cols ? m.cols() : m.rows();
  if (count == 0 || begin + count > extent) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + m.shape());
  }
  if (axis == Axis::cols) {
    Matrix out(m.rows(), count);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, begin + j);
    return out;
  }
  Matrix out(count, m.cols());
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(begin + i, j);
  return out;
}

inline double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double v : m.data()) acc += v * v;
  return std::sqrt(acc);
}

inline double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double v : m.data()) best = std::max(best, std::abs(v));
  return best;
}

/// ||a - b||_F / ||b||_F, or the absolute difference norm when b is zero.
inline double relative_error(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("relative_error shape mismatch");
  double diff = 0.0;
  double ref = 0.0;
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < as.size(); ++i) {
    diff += (as[i] - bs[i]) * (as[i] - bs[i]);
    ref += bs[i] * bs[i];
  }
  diff = std::sqrt(diff);
  ref = std::sqrt(ref);
  return ref > 0.0 ? diff / ref : diff;
}

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

/// Rank by Gaussian elimination with complete (row and column) pivoting.
/// Pivots with magnitude <= tol * max|entry| count as zero.
inline std::size_t numerical_rank(const Matrix& m, double tol = 1e-9) {
  if (!(tol > 0.0)) throw RangeError("numerical_rank tolerance must be positive");
  if (m.empty()) return 0;
  const double threshold = tol * max_abs(m);
  if (threshold == 0.0) return 0;

  Matrix work = m;
  const std::size_t n_rows = work.rows();
  const std::size_t n_cols = work.cols();
  std::size_t rank = 0;
  for (; rank < std::min(n_rows, n_cols); ++rank) {
    std::size_t pr = rank, pc = rank;
    double best = 0.0;
    for (std::size_t i = rank; i < n_rows; ++i)
      for (std::size_t j = rank; j < n_cols; ++j)
        if (std::abs(work(i, j)) > best) {
          best = std::abs(work(i, j));
          pr = i;
          pc = j;
        }
    if (best <= threshold) break;
    if (pr != rank)
      for (std::size_t j = 0; j < n_cols; ++j) std::swap(work(rank, j), work(pr, j));
    if (pc != rank)
      for (std::size_t i = 0; i < n_rows; ++i) std::swap(work(i, rank), work(i, pc));
    const double pivot = work(rank, rank);
    for (std::size_t i = rank + 1; i < n_rows; ++i) {
      const double factor = work(i, rank) / pivot;
      if (factor == 0.0) continue;
      for (std::size_t j = rank; j < n_cols; ++j) work(i, j) -= factor * work(rank, j);
    }
  }
  return rank;
}

/// CRC32 over the raw bytes of the entries; used to detect mutation.
inline std::uint32_t checksum(const Matrix& m) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto bytes = std::as_bytes(m.data());
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  const std::uint64_t dims[2] = {m.rows(), m.cols()};
  crc = crc32(crc, reinterpret_cast<const Bytef*>(dims), sizeof(dims));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace lorafuse
