// SPDX-License-Identifier: Apache-2.0
#include "elx/tensor.hpp"

namespace elx {
namespace kernels {

template <typename T>
void matmul(const T* a, const T* b, T* out, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* orow = out + i * n;
    for (int64_t j = 0; j < n; ++j) orow[j] = T(0);
    const T* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      axpy(orow, b + p * n, arow[p], n);
    }
  }
}

template <typename T>
void matmul_nt(const T* a, const T* b_t, T* out, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* orow = out + i * n;
    for (int64_t j = 0; j < n; ++j) orow[j] = dot(arow, b_t + j * k, k);
  }
}

template <typename T>
void matmul_tn(const T* a_t, const T* b, T* out, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < k; ++i) {
    for (int64_t j = 0; j < n; ++j) out[i * n + j] = T(0);
  }
  for (int64_t p = 0; p < m; ++p) {
    const T* arow = a_t + p * k;
    const T* brow = b + p * n;
    for (int64_t i = 0; i < k; ++i) {
      axpy(out + i * n, brow, arow[i], n);
    }
  }
}

template void matmul<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void matmul_nt<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul_nt<double>(const double*, const double*, double*, int64_t, int64_t,
                                int64_t);
template void matmul_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul_tn<double>(const double*, const double*, double*, int64_t, int64_t,
                                int64_t);

}  // namespace kernels

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 tensors");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner dimensions mismatch: " + std::to_string(a.dim(1)) +
                         " vs " + std::to_string(b.dim(0)));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  kernels::matmul(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
  return out;
}

template Tensor<float> matmul<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace elx
