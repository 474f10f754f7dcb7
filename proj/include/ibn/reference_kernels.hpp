#pragma once

// Serial, unblocked kernels. Slow on purpose: they are the yardstick the
// parallel kernels are tested and benchmarked against.

#include <cstddef>

#include "ibn/kernels.hpp"

namespace ibn::reference {

template <class T>
void gemm(kernels::Trans ta, kernels::Trans tb, std::size_t M, std::size_t N, std::size_t K, T alpha, const T* A,
          std::size_t lda, const T* B, std::size_t ldb, T beta, T* C, std::size_t ldc) {
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < K; ++p) {
        const T a = ta == kernels::Trans::No ? A[i * lda + p] : A[p * lda + i];
        const T b = tb == kernels::Trans::No ? B[p * ldb + j] : B[j * ldb + p];
        acc += static_cast<double>(a) * static_cast<double>(b);
      }
      const double prev = beta == T(0) ? 0.0 : static_cast<double>(beta) * C[i * ldc + j];
      C[i * ldc + j] = static_cast<T>(static_cast<double>(alpha) * acc + prev);
    }
  }
}

// Direct cross-correlation. x [N,C,H,W], w [O,C,kh,kw], bias [O] or null,
// y [N,O,OH,OW].
template <class T>
void conv2d_forward(const kernels::ConvGeom& g, std::size_t batch, std::size_t out_ch, const T* x, const T* w,
                    const T* bias, T* y) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < out_ch; ++o)
      for (std::size_t yy = 0; yy < oh; ++yy)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = bias ? static_cast<double>(bias[o]) : 0.0;
          for (std::size_t c = 0; c < g.channels; ++c)
            for (std::size_t ki = 0; ki < g.kh; ++ki)
              for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const auto iy = static_cast<std::ptrdiff_t>(yy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(xx * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.width))
                  continue;
                acc += static_cast<double>(x[((n * g.channels + c) * g.height + iy) * g.width + ix]) *
                       static_cast<double>(w[((o * g.channels + c) * g.kh + ki) * g.kw + kj]);
              }
          y[((n * out_ch + o) * oh + yy) * ow + xx] = static_cast<T>(acc);
        }
}

}  // namespace ibn::reference
