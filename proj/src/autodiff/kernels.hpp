// Dense row-major GEMM kernels. All accumulate into C.
//
// With RTDLAB_HAVE_EIGEN the products go through Eigen's blocked GEMM; the
// loops below are the portable fallback.

#pragma once

#include <cstddef>
#include <vector>

#ifdef RTDLAB_HAVE_EIGEN
// Eigen evaluates small products coefficient-wise, and that path peels
// scalar iterations off according to buffer alignment, so identical inputs
// at different addresses could round differently. Always taking the blocked
// GEMM path keeps results independent of where the buffers live.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
#include <Eigen/Core>
#endif

#ifndef RTDLAB_SMALL_GEMM
#define RTDLAB_SMALL_GEMM 16384
#endif

namespace rtdlab::ad::kernels {

#ifdef RTDLAB_HAVE_EIGEN
namespace eigen {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using In = Eigen::Map<const RowMat<T>>;
template <typename T>
using Out = Eigen::Map<RowMat<T>>;

inline Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// Below this many multiply-adds the blocked GEMM's packing overhead
// dominates, so the plain loops are used instead. They vectorize only
// across independent output columns, so they are address-independent too.
inline bool small(std::size_t m, std::size_t n, std::size_t k) {
  return m * n * k < RTDLAB_SMALL_GEMM;
}

}  // namespace eigen
#endif

// C(m,n) += A(m,k) * B(k,n)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  if (m == 0 || n == 0 || k == 0) return;
#ifdef RTDLAB_HAVE_EIGEN
  using namespace eigen;
  if (!small(m, n, k)) {
    Out<T>(c, idx(m), idx(n)).noalias() += In<T>(a, idx(m), idx(k)) * In<T>(b, idx(k), idx(n));
    return;
  }
#endif
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + i * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    const T* a0 = a + i * k;
    const T* a1 = a0 + k;
    const T* a2 = a1 + k;
    const T* a3 = a2 + k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += v * brow[j];
    }
  }
}

// C(m,n) += A(k,m)^T * B(k,n)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  if (m == 0 || n == 0 || k == 0) return;
#ifdef RTDLAB_HAVE_EIGEN
  using namespace eigen;
  if (!small(m, n, k)) {
    Out<T>(c, idx(m), idx(n)).noalias() += In<T>(a, idx(k), idx(m)).transpose() * In<T>(b, idx(k), idx(n));
    return;
  }
#endif
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T v = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += v * brow[j];
    }
  }
}

template <typename T>
void transpose_into(const T* src, T* dst, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = r0 + kBlock < rows ? r0 + kBlock : rows;
      const std::size_t c1 = c0 + kBlock < cols ? c0 + kBlock : cols;
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t cc = c0; cc < c1; ++cc) dst[cc * rows + r] = src[r * cols + cc];
      }
    }
  }
}

// C(m,n) += A(m,k) * B(n,k)^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
             std::vector<T>& scratch) {
  if (m == 0 || n == 0 || k == 0) return;
#ifdef RTDLAB_HAVE_EIGEN
  using namespace eigen;
  if (!small(m, n, k)) {
    Out<T>(c, idx(m), idx(n)).noalias() += In<T>(a, idx(m), idx(k)) * In<T>(b, idx(n), idx(k)).transpose();
    return;
  }
#endif
  scratch.resize(n * k);
  transpose_into(b, scratch.data(), n, k);
  gemm_nn(a, scratch.data(), c, m, n, k);
}

}  // namespace rtdlab::ad::kernels
