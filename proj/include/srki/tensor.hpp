#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "srki/errors.hpp"

namespace srki {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw DimensionError("Tensor: shape " + shape_string(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("Tensor::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const {
    require_rank(2);
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank(2);
    return shape_[1];
  }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::span<double> row(std::size_t i) {
    const std::size_t c = cols();
    return std::span<double>(data_).subspan(i * c, c);
  }
  std::span<const double> row(std::size_t i) const {
    const std::size_t c = cols();
    return std::span<const double>(data_).subspan(i * c, c);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  // Appends the rows of `other` (same column count) to this matrix.
  void append_rows(const Tensor& other) {
    if (rank() != 2 || other.rank() != 2 || cols() != other.cols()) {
      throw DimensionError("append_rows: " + shape_string(shape_) + " vs " +
                           shape_string(other.shape_));
    }
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    shape_[0] += other.shape_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void check_finite(const char* what) const {
    if (!all_finite()) throw NumericError(std::string(what) + ": non-finite value");
  }

  void require_rank(std::size_t r) const {
    if (shape_.size() != r) {
      throw DimensionError("expected rank " + std::to_string(r) + " tensor, got " +
                           shape_string(shape_));
    }
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Tape-level flag: whether this value participates in gradient tracking.
  bool requires_grad = false;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t element_count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// a (m x k) * b (k x n)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  a.require_rank(2);
  b.require_rank(2);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  Tensor out = Tensor::matrix(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a (m x k) * b^T where b is (n x k)
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  a.require_rank(2);
  b.require_rank(2);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_bt: " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()) + "^T");
  }
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b.data().data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out(i, j) = s;
    }
  }
  return out;
}

// a^T * b where a is (k x m), b is (k x n)
inline Tensor matmul_at(const Tensor& a, const Tensor& b) {
  a.require_rank(2);
  b.require_rank(2);
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_at: " + shape_string(a.shape()) + "^T * " +
                         shape_string(b.shape()));
  }
  Tensor out = Tensor::matrix(m, n);
  double* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a.data().data() + p * m;
    const double* br = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
    }
  }
  return out;
}

inline void add_inplace(Tensor& dst, const Tensor& src, double alpha = 1.0) {
  require_same_shape(dst, src, "add_inplace");
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}

// Rows gathered by index, in the order given.
inline Tensor gather_rows(const Tensor& src, std::span<const std::size_t> idx) {
  const std::size_t c = src.cols();
  Tensor out = Tensor::matrix(idx.size(), c);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= src.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[r]) + " out of range " +
                           std::to_string(src.rows()));
    }
    std::copy_n(src.row(idx[r]).begin(), c, out.row(r).begin());
  }
  return out;
}

// Visibility mask, one byte per element; nonzero means visible.
using Mask = std::vector<unsigned char>;

// Softmax over the visible entries of a single row; invisible entries are
// treated as -inf and come out exactly 0.
inline void softmax_row_masked(std::span<const double> x, const unsigned char* visible,
                               std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (visible && !visible[j]) continue;
    any = true;
    mx = std::max(mx, x[j]);
  }
  if (!any) throw DegenerateError("softmax: fully masked row");
  if (!std::isfinite(mx)) throw NumericError("softmax: non-finite logit");
  double sum = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (visible && !visible[j]) {
      out[j] = 0.0;
      continue;
    }
    out[j] = std::exp(x[j] - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < x.size(); ++j) out[j] *= inv;
}

inline Tensor masked_softmax_rows(const Tensor& x, const Mask& visible) {
  x.require_rank(2);
  if (visible.size() != x.size()) {
    throw DimensionError("masked_softmax_rows: mask has " + std::to_string(visible.size()) +
                         " entries for " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    softmax_row_masked(x.row(i), visible.data() + i * c, out.row(i));
  }
  return out;
}

inline double log_sum_exp(std::span<const double> x) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

// Mean negative log-probability of targets over unmasked rows.
inline double cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                            const std::vector<bool>& loss_mask) {
  logits.require_rank(2);
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n || loss_mask.size() != n) {
    throw DimensionError("cross_entropy: targets/mask length must equal " + std::to_string(n));
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!loss_mask[i]) continue;
    if (targets[i] >= v) throw DimensionError("cross_entropy: target out of vocabulary");
    total += log_sum_exp(logits.row(i)) - logits(i, targets[i]);
    ++count;
  }
  if (count == 0) throw DegenerateError("cross_entropy: all positions masked");
  const double loss = total / static_cast<double>(count);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  return loss;
}

}  // namespace srki
