// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "elx/errors.hpp"
#include "elx/rng.hpp"

namespace elx {

// Dense row-major tensor. Row-major layout is the canonical storage order
// everywhere, including the checkpoint blob.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), T(0));
  }

  Tensor(std::vector<int64_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_of(shape_) != static_cast<int64_t>(data_.size())) {
      throw DimensionError("tensor data size does not match shape");
    }
  }

  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.gaussian(0.0, stddev));
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, T value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return {data_.data(), data_.size()}; }
  std::span<const T> span() const { return {data_.data(), data_.size()}; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-D accessors (the common case for weights).
  T& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  const T& at(int64_t r, int64_t c) const {
    return data_[static_cast<size_t>(r * shape_[1] + c)];
  }
  T* row(int64_t r) { return data_.data() + r * shape_[1]; }
  const T* row(int64_t r) const { return data_.data() + r * shape_[1]; }

  void fill(T value) {
    for (auto& v : data_) v = value;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw DimensionError("negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace kernels {

// Fixed-lane dot product. The lane structure pins the floating-point
// reduction order for a given length, so results are bitwise reproducible
// run to run while still vectorizing.
template <typename T>
inline T dot(const T* a, const T* b, int64_t n) {
  T lanes[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  }
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  return (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
          ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) +
         tail;
}

// y[0:n) += s * x[0:n)
template <typename T>
inline void axpy(T* y, const T* x, T s, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += s * x[i];
}

// out[m,n] = a[m,k] * b[k,n]; accumulation runs in k order per output row.
template <typename T>
void matmul(const T* a, const T* b, T* out, int64_t m, int64_t k, int64_t n);

// out[m,n] = a[m,k] * b_t[n,k]^T  (b stored row-major with rows = outputs)
template <typename T>
void matmul_nt(const T* a, const T* b_t, T* out, int64_t m, int64_t k, int64_t n);

// out[k,n] = a_t[m,k]^T * b[m,n]
template <typename T>
void matmul_tn(const T* a_t, const T* b, T* out, int64_t m, int64_t k, int64_t n);

}  // namespace kernels

// Checked matmul over whole tensors: a[m,k] x b[k,n] -> [m,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace elx
