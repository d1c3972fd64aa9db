#include "peva/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "peva/error.hpp"

namespace peva {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {
  for (auto extent : shape_) {
    if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto extent : shape_) {
    if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape_));
  }
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? 1 : data_.size() / shape_.back();
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

namespace kernels {

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t p = a.shape()[0], q = a.shape()[1], r = b.shape()[1];
  if (b.shape()[0] != q) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor c({p, r});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < p; ++i) {
    double* crow = pc + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = pa[i * q + k];
      if (aik == 0.0) continue;
      const double* brow = pb + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t p = a.shape()[0], q = a.shape()[1], r = b.shape()[0];
  if (b.shape()[1] != q) {
    throw DimensionError("matmul_nt shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  Tensor c({p, r});
  for (std::size_t i = 0; i < p; ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < r; ++j) c(i, j) = dot(arow, b.row(j));
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t q = a.shape()[0], p = a.shape()[1], r = b.shape()[1];
  if (b.shape()[0] != q) {
    throw DimensionError("matmul_tn shape mismatch: " + shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()));
  }
  Tensor c({p, r});
  double* pc = c.data().data();
  for (std::size_t k = 0; k < q; ++k) {
    const auto arow = a.row(k);
    const auto brow = b.row(k);
    for (std::size_t i = 0; i < p; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = pc + i * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t p = a.shape()[0], q = a.shape()[1];
  Tensor t({q, p});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) t(j, i) = a(i, j);
  return t;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor y = x;
  const std::size_t k = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = y.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < k; ++j) row[j] /= total;
  }
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace kernels

}  // namespace peva
