// Elementwise transcendental functions over buffers. Single precision goes
// through Eigen's vectorized versions when available; double precision
// always uses the C library so reference computations stay exact-as-libm.
//
// The float path runs every element through the packet kernel by staging
// fixed blocks in an aligned buffer. Mapping the caller's buffer directly
// would let Eigen peel unaligned leading elements onto the scalar path,
// which rounds differently, so results would depend on buffer addresses.

#pragma once

#include <cmath>
#include <cstddef>
#include <type_traits>

#ifdef RTDLAB_HAVE_EIGEN
#include <algorithm>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#endif

namespace rtdlab::ad::vmath {

#ifdef RTDLAB_HAVE_EIGEN
namespace detail {

inline constexpr std::size_t kBlock = 64;
using Block = Eigen::Map<Eigen::Array<float, kBlock, 1>, Eigen::Aligned64>;

template <typename F>
void staged(float* x, std::size_t n, F&& apply) {
  alignas(64) float buf[kBlock];
  for (std::size_t i = 0; i < n; i += kBlock) {
    const std::size_t len = std::min(kBlock, n - i);
    std::copy(x + i, x + i + len, buf);
    std::fill(buf + len, buf + kBlock, 0.0f);
    Block v(buf);
    apply(v);
    std::copy(buf, buf + len, x + i);
  }
}

}  // namespace detail
#endif

template <typename T>
void exp_inplace(T* x, std::size_t n) {
#ifdef RTDLAB_HAVE_EIGEN
  if constexpr (std::is_same_v<T, float>) {
    detail::staged(x, n, [](detail::Block& v) { v = v.exp(); });
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
}

template <typename T>
void erf_inplace(T* x, std::size_t n) {
#ifdef RTDLAB_HAVE_EIGEN
  if constexpr (std::is_same_v<T, float>) {
    detail::staged(x, n, [](detail::Block& v) { v = v.erf(); });
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) x[i] = std::erf(x[i]);
}

}  // namespace rtdlab::ad::vmath
