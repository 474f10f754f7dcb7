#pragma once

// Dense compute kernels behind the differentiable ops. The parallel versions
// split work over output elements only, so results are bitwise identical for
// any thread count. Naive serial counterparts live in reference_kernels.hpp.

#include <cstddef>

namespace ibn::kernels {

enum class Trans { No, Yes };

// C[M,N] = alpha * op(A)[M,K] * op(B)[K,N] + beta * C. Row-major; lda/ldb/ldc
// are the row strides of the stored (untransposed) matrices.
template <class T>
void gemm(Trans ta, Trans tb, std::size_t M, std::size_t N, std::size_t K, T alpha, const T* A, std::size_t lda,
          const T* B, std::size_t ldb, T beta, T* C, std::size_t ldc);

struct ConvGeom {
  std::size_t channels, height, width;
  std::size_t kh, kw;
  std::size_t stride, pad;
  std::size_t out_h() const { return (height + 2 * pad - kh) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kw) / stride + 1; }
};

// Batched im2col: `images` is [N, C, H, W]; `col` is [C*kh*kw, N*OH*OW].
template <class T>
void im2col(const ConvGeom& g, std::size_t batch, const T* images, T* col);

// Adjoint of im2col; accumulates into `images`.
template <class T>
void col2im_add(const ConvGeom& g, std::size_t batch, const T* col, T* images);

// Thread count used by parallel kernels. 0 restores the OpenMP default.
void set_num_threads(int n);
int num_threads();
// Applies IBNKIT_THREADS if set; returns the resulting thread count.
int configure_threads_from_env();

}  // namespace ibn::kernels
