// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace unilora {

/// Raised when a caller breaks an operation's contract (shapes, ranges,
/// lifecycle). Every error in the library derives from this type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TokenId = std::int32_t;

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error("Matrix: data length " + std::to_string(data_.size()) + " != " +
                  std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  T* row(std::size_t r) noexcept { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const noexcept { return data_.data() + r * cols_; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::size_t byte_size() const noexcept { return data_.size() * sizeof(T); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Copy of rows [start, start + count).
  Matrix slice_rows(std::size_t start, std::size_t count) const {
    if (start + count > rows_) throw Error("slice_rows: range out of bounds");
    Matrix out(count, cols_);
    std::copy(row(start), row(start) + count * cols_, out.data_.begin());
    return out;
  }

  void set_rows(std::size_t start, const Matrix& src) {
    if (src.cols_ != cols_ || start + src.rows_ > rows_) throw Error("set_rows: shape mismatch");
    std::copy(src.data_.begin(), src.data_.end(), row(start));
  }

  Matrix& operator+=(const Matrix& o) {
    if (o.rows_ != rows_ || o.cols_ != cols_) throw Error("operator+=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator*=(T s) {
    for (auto& x : data_) x *= s;
    return *this;
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.storage()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

namespace detail {

inline void require(bool cond, const char* what) {
  if (!cond) throw Error(what);
}

// Dot product with four interleaved partial sums, combined in a fixed order.
// The reduction order depends only on n, so results are bit-reproducible.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) noexcept {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    s0 += a[k] * b[k];
    s1 += a[k + 1] * b[k + 1];
    s2 += a[k + 2] * b[k + 2];
    s3 += a[k + 3] * b[k + 3];
  }
  for (; k < n; ++k) s0 += a[k] * b[k];
  return (s0 + s1) + (s2 + s3);
}

// y += a * x
template <typename T>
inline void axpy(T a, const T* x, T* y, std::size_t n) noexcept {
  for (std::size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

}  // namespace detail

template <typename T>
bool all_finite(const Matrix<T>& m) noexcept {
  for (T x : m.flat()) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

template <typename T>
const Matrix<T>& ensure_finite(const Matrix<T>& m, const char* op) {
  if (!all_finite(m)) throw Error(std::string(op) + ": non-finite value produced");
  return m;
}

/// C = A · B. Each output accumulates over k in increasing order.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw Error("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                std::to_string(b.rows()) + ")");
  }
  Matrix<T> c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* out = c.row(i);
    const T* ar = a.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) detail::axpy(ar[k], b.row(k), out, n);
  }
  ensure_finite(c, "matmul");
  return c;
}

/// C = A · Bᵀ, the layout used for weights stored as [out, in].
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) throw Error("matmul_nt: inner dimensions differ");
  Matrix<T> c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ar = a.row(i);
    T* out = c.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out[j] = detail::dot(ar, b.row(j), a.cols());
  }
  ensure_finite(c, "matmul_nt");
  return c;
}

/// C = Aᵀ · B.
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) throw Error("matmul_tn: inner dimensions differ");
  Matrix<T> c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* ar = a.row(k);
    const T* br = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) detail::axpy(ar[i], br, c.row(i), b.cols());
  }
  ensure_finite(c, "matmul_tn");
  return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// In-place stabilized softmax of scale·x over a contiguous row.
template <typename T>
void softmax_row_inplace(T* x, std::size_t n, T scale) {
  T m = scale * x[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, scale * x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    x[j] = std::exp(scale * x[j] - m);
    sum += x[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) x[j] *= inv;
}

/// Row-wise softmax of scale·x, stabilized by subtracting the row maximum.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& x, T scale = T(1)) {
  if (!all_finite(x)) throw Error("softmax_rows: input not finite");
  Matrix<T> y = x;
  if (x.cols() == 0) return y;
  for (std::size_t i = 0; i < y.rows(); ++i) softmax_row_inplace(y.row(i), y.cols(), scale);
  return y;
}

/// Given y = softmax_rows(x, scale) and dL/dy, returns dL/dx.
template <typename T>
Matrix<T> softmax_rows_backward(const Matrix<T>& y, const Matrix<T>& dy, T scale = T(1)) {
  if (y.rows() != dy.rows() || y.cols() != dy.cols()) throw Error("softmax_rows_backward: shape mismatch");
  Matrix<T> dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const T* yr = y.row(i);
    const T* gr = dy.row(i);
    T inner = 0;
    for (std::size_t j = 0; j < y.cols(); ++j) inner += yr[j] * gr[j];
    T* out = dx.row(i);
    for (std::size_t j = 0; j < y.cols(); ++j) out[j] = scale * yr[j] * (gr[j] - inner);
  }
  return dx;
}

/// y = x / sqrt(mean(x²) + eps) ⊙ gain, per row.
template <typename T>
Matrix<T> rms_norm(const Matrix<T>& x, std::span<const T> gain, T eps) {
  if (gain.size() != x.cols()) throw Error("rms_norm: gain length != cols");
  Matrix<T> y(x.rows(), x.cols());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const T* xr = x.row(i);
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += xr[j] * xr[j];
    const T inv = T(1) / std::sqrt(ss / T(n) + eps);
    T* yr = y.row(i);
    for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] * inv * gain[j];
  }
  ensure_finite(y, "rms_norm");
  return y;
}

/// dL/dx for rms_norm; the gain is frozen so no gain gradient is produced.
template <typename T>
Matrix<T> rms_norm_backward(const Matrix<T>& x, std::span<const T> gain, T eps, const Matrix<T>& dy) {
  if (gain.size() != x.cols() || dy.rows() != x.rows() || dy.cols() != x.cols()) {
    throw Error("rms_norm_backward: shape mismatch");
  }
  Matrix<T> dx(x.rows(), x.cols());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const T* xr = x.row(i);
    const T* gr = dy.row(i);
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += xr[j] * xr[j];
    const T inv = T(1) / std::sqrt(ss / T(n) + eps);
    T proj = 0;
    for (std::size_t j = 0; j < n; ++j) proj += gr[j] * gain[j] * xr[j];
    const T coef = proj * inv * inv * inv / T(n);
    T* out = dx.row(i);
    for (std::size_t j = 0; j < n; ++j) out[j] = gr[j] * gain[j] * inv - xr[j] * coef;
  }
  return dx;
}

template <typename T>
inline T sigmoid(T x) noexcept {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
Matrix<T> silu(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x.storage()[i];
    y.storage()[i] = v * sigmoid(v);
  }
  return y;
}

template <typename T>
Matrix<T> silu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
  if (x.rows() != dy.rows() || x.cols() != dy.cols()) throw Error("silu_backward: shape mismatch");
  Matrix<T> dx(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x.storage()[i];
    const T s = sigmoid(v);
    dx.storage()[i] = dy.storage()[i] * s * (T(1) + v * (T(1) - s));
  }
  return dx;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("hadamard: shape mismatch");
  Matrix<T> c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.storage()[i] = a.storage()[i] * b.storage()[i];
  return c;
}

/// Gathers embedding rows for each token.
template <typename T>
Matrix<T> embedding(const Matrix<T>& table, std::span<const TokenId> tokens) {
  Matrix<T> out(tokens.size(), table.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= table.rows()) {
      throw Error("embedding: token id " + std::to_string(t) + " outside vocabulary");
    }
    std::copy(table.row(t), table.row(t) + table.cols(), out.row(i));
  }
  return out;
}

/// Scatter-add of upstream rows into a [vocab, hidden] gradient table.
template <typename T>
Matrix<T> embedding_backward(std::size_t vocab, std::span<const TokenId> tokens, const Matrix<T>& dy) {
  if (dy.rows() != tokens.size()) throw Error("embedding_backward: row count mismatch");
  Matrix<T> g(vocab, dy.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw Error("embedding_backward: token outside vocabulary");
    detail::axpy(T(1), dy.row(i), g.row(t), dy.cols());
  }
  return g;
}

/// Unnormalized shifted cross-entropy over one sequence: row p predicts
/// labels[p + 1]. Returns the summed loss and the number of supervised
/// positions; `dlogits` receives the gradient of the *sum*.
template <typename T>
std::pair<T, std::size_t> cross_entropy_shifted_sum(const Matrix<T>& logits, std::span<const TokenId> labels,
                                                    TokenId ignore_id, Matrix<T>& dlogits) {
  const std::size_t s = logits.rows();
  const std::size_t v = logits.cols();
  if (s < 2) throw Error("cross_entropy_shifted: need at least 2 positions");
  if (labels.size() != s) throw Error("cross_entropy_shifted: labels length != rows");
  if (dlogits.rows() != s || dlogits.cols() != v) dlogits = Matrix<T>(s, v);
  T total = 0;
  std::size_t count = 0;
  std::vector<T> probs(v);
  for (std::size_t p = 0; p + 1 < s; ++p) {
    const TokenId target = labels[p + 1];
    if (target == ignore_id) continue;
    if (target < 0 || static_cast<std::size_t>(target) >= v) throw Error("cross_entropy_shifted: label outside vocabulary");
    const T* row = logits.row(p);
    std::copy(row, row + v, probs.begin());
    T m = probs[0];
    for (std::size_t j = 1; j < v; ++j) m = std::max(m, probs[j]);
    T z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(probs[j] - m);
    const T lse = m + std::log(z);
    total += lse - row[target];
    T* g = dlogits.row(p);
    for (std::size_t j = 0; j < v; ++j) g[j] += std::exp(row[j] - lse);
    g[target] -= T(1);
    ++count;
  }
  return {total, count};
}

template <typename T>
struct CrossEntropyResult {
  T loss;
  Matrix<T> dlogits;
};

/// Mean shifted cross-entropy and its exact gradient.
template <typename T>
CrossEntropyResult<T> cross_entropy_shifted(const Matrix<T>& logits, std::span<const TokenId> labels,
                                            TokenId ignore_id) {
  Matrix<T> d(logits.rows(), logits.cols());
  auto [sum, count] = cross_entropy_shifted_sum(logits, labels, ignore_id, d);
  if (count == 0) throw Error("empty loss support");
  d *= T(1) / T(count);
  return {sum / T(count), std::move(d)};
}

template <typename T>
std::size_t argmax(std::span<const T> v) {
  if (v.empty()) throw Error("argmax: empty input");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// max |a - b| over all entries.
template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("max_abs_diff: shape mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.storage()[i] - b.storage()[i]));
  return m;
}

/// max |a - b| / max |b|: the relative error measure used for logits.
template <typename T>
T max_rel_diff(const Matrix<T>& a, const Matrix<T>& b) {
  T scale = 0;
  for (T x : b.flat()) scale = std::max(scale, std::abs(x));
  if (scale == T(0)) return max_abs_diff(a, b);
  return max_abs_diff(a, b) / scale;
}

}  // namespace unilora
