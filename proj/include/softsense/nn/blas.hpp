#pragma once

// GEMM on raw row-major buffers, backed by Eigen.

#include <Eigen/Core>

#include <cstddef>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace softsense::nn {

namespace detail {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstView = Eigen::Map<const RowMajor<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using View = Eigen::Map<RowMajor<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

}  // namespace detail

/// Row-major C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  using detail::ConstView;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  const ConstView<T> A(a, trans_a ? ei(k) : ei(m), trans_a ? ei(m) : ei(k), Eigen::OuterStride<>(ei(lda)));
  const ConstView<T> B(b, trans_b ? ei(n) : ei(k), trans_b ? ei(k) : ei(n), Eigen::OuterStride<>(ei(ldb)));
  detail::View<T> C(c, ei(m), ei(n), Eigen::OuterStride<>(ei(ldc)));
  if (beta == T(0)) {
    C.setZero();
  } else if (beta != T(1)) {
    C *= beta;
  }
  if (trans_a && trans_b) {
    C.noalias() += alpha * (A.transpose() * B.transpose());
  } else if (trans_a) {
    C.noalias() += alpha * (A.transpose() * B);
  } else if (trans_b) {
    C.noalias() += alpha * (A * B.transpose());
  } else {
    C.noalias() += alpha * (A * B);
  }
}

/// Sets flush-to-zero / denormals-are-zero for the current thread while in
/// scope. Float training otherwise slows down several-fold once small
/// gradients and activations drift into the subnormal range.
class FlushDenormals {
 public:
#if defined(__SSE__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushDenormals() { _mm_setcsr(saved_); }
#else
  FlushDenormals() = default;
#endif
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
#if defined(__SSE__)
  unsigned saved_;
#endif
};

/// Worker threads for GEMM; has an effect only in OpenMP builds.
inline void set_blas_threads(int n) { Eigen::setNbThreads(n); }

}  // namespace softsense::nn
