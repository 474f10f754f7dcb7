#include "ibn/kernels.hpp"

#include <omp.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

namespace ibn::kernels {

namespace {

#if defined(__GLIBC__)
// Activation and gradient buffers are large and short-lived. Keeping them on
// the heap instead of fresh mmaps avoids a page-fault storm on every step.
[[maybe_unused]] const bool heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

#if defined(__AVX512F__)
constexpr std::size_t kVecBytes = 64;
constexpr std::size_t kMR = 8;
#elif defined(__AVX__)
constexpr std::size_t kVecBytes = 32;
constexpr std::size_t kMR = 6;
#else
constexpr std::size_t kVecBytes = 16;
constexpr std::size_t kMR = 4;
#endif

typedef float vfloat __attribute__((vector_size(kVecBytes)));
typedef double vdouble __attribute__((vector_size(kVecBytes)));

template <class T>
struct Simd;
template <>
struct Simd<float> {
  using V = vfloat;
};
template <>
struct Simd<double> {
  using V = vdouble;
};

template <class T>
struct Blocking {
  static constexpr std::size_t lanes = kVecBytes / sizeof(T);
  static constexpr std::size_t MR = kMR;
  static constexpr std::size_t NR = 2 * lanes;
  static constexpr std::size_t KC = 256;
  static constexpr std::size_t MC = kMR * 16;
  static constexpr std::size_t NC = NR * 64;
};

template <class T>
inline T load_a(const T* A, std::size_t lda, Trans ta, std::size_t i, std::size_t p) {
  return ta == Trans::No ? A[i * lda + p] : A[p * lda + i];
}

// Packs rows [i0, i0+mc) x cols [p0, p0+kc) of op(A) into MR-row slivers.
template <class T>
void pack_a(Trans ta, const T* A, std::size_t lda, std::size_t i0, std::size_t mc, std::size_t p0, std::size_t kc,
            T* out) {
  constexpr std::size_t MR = Blocking<T>::MR;
  const std::size_t slivers = (mc + MR - 1) / MR;
  for (std::size_t s = 0; s < slivers; ++s) {
    T* dst = out + s * MR * kc;
    const std::size_t rows = std::min(MR, mc - s * MR);
    if (ta == Trans::No) {
      // Row-major A: walk each source row contiguously.
      for (std::size_t r = 0; r < rows; ++r) {
        const T* src = A + (i0 + s * MR + r) * lda + p0;
        for (std::size_t p = 0; p < kc; ++p) dst[p * MR + r] = src[p];
      }
    } else {
      for (std::size_t p = 0; p < kc; ++p) {
        const T* src = A + (p0 + p) * lda + i0 + s * MR;
        for (std::size_t r = 0; r < rows; ++r) dst[p * MR + r] = src[r];
      }
    }
    for (std::size_t r = rows; r < MR; ++r)
      for (std::size_t p = 0; p < kc; ++p) dst[p * MR + r] = T(0);
  }
}

// Packs rows [p0, p0+kc) x cols [j0, j0+nc) of op(B) into NR-column panels.
template <class T>
void pack_b(Trans tb, const T* B, std::size_t ldb, std::size_t p0, std::size_t kc, std::size_t j0, std::size_t nc,
            T* out) {
  constexpr std::size_t NR = Blocking<T>::NR;
  const std::ptrdiff_t panels = static_cast<std::ptrdiff_t>((nc + NR - 1) / NR);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < panels; ++s) {
    T* dst = out + static_cast<std::size_t>(s) * NR * kc;
    const std::size_t jb = j0 + static_cast<std::size_t>(s) * NR;
    const std::size_t cols = std::min(NR, nc - static_cast<std::size_t>(s) * NR);
    if (tb == Trans::No) {
      for (std::size_t p = 0; p < kc; ++p) {
        T* row = dst + p * NR;
        std::memcpy(row, B + (p0 + p) * ldb + jb, cols * sizeof(T));
        for (std::size_t c = cols; c < NR; ++c) row[c] = T(0);
      }
    } else {
      // Transposed B: each output column is a contiguous source row.
      for (std::size_t c = 0; c < cols; ++c) {
        const T* src = B + (jb + c) * ldb + p0;
        for (std::size_t p = 0; p < kc; ++p) dst[p * NR + c] = src[p];
      }
      for (std::size_t p = 0; p < kc; ++p)
        for (std::size_t c = cols; c < NR; ++c) dst[p * NR + c] = T(0);
    }
  }
}

// Accumulates an MR x NR tile of packed A times packed B over kc steps. A full
// tile is written to C from registers; ragged edges go through `tile`.
template <class T>
inline void micro_kernel(std::size_t kc, const T* __restrict a, const T* __restrict b, T alpha,
                         T beta, T* __restrict c, std::size_t ldc, std::size_t rows, std::size_t cols) {
  using V = typename Simd<T>::V;
  constexpr std::size_t MR = Blocking<T>::MR;
  constexpr std::size_t NR = Blocking<T>::NR;
  constexpr std::size_t L = Blocking<T>::lanes;
  V c0[MR], c1[MR];
  for (std::size_t i = 0; i < MR; ++i) {
    c0[i] = V{};
    c1[i] = V{};
  }
  for (std::size_t p = 0; p < kc; ++p) {
    V b0, b1;
    std::memcpy(&b0, b + p * NR, sizeof(V));
    std::memcpy(&b1, b + p * NR + L, sizeof(V));
    const T* ap = a + p * MR;
    for (std::size_t i = 0; i < MR; ++i) {
      const T av = ap[i];
      c0[i] += av * b0;
      c1[i] += av * b1;
    }
  }
  if (rows == MR && cols == NR) {
    for (std::size_t i = 0; i < MR; ++i) {
      T* crow = c + i * ldc;
      V r0 = alpha * c0[i];
      V r1 = alpha * c1[i];
      if (beta != T(0)) {
        V o0, o1;
        std::memcpy(&o0, crow, sizeof(V));
        std::memcpy(&o1, crow + L, sizeof(V));
        r0 += beta * o0;
        r1 += beta * o1;
      }
      std::memcpy(crow, &r0, sizeof(V));
      std::memcpy(crow + L, &r1, sizeof(V));
    }
    return;
  }
  alignas(64) T tile[MR * NR];
  for (std::size_t i = 0; i < MR; ++i) {
    std::memcpy(tile + i * NR, &c0[i], sizeof(V));
    std::memcpy(tile + i * NR + L, &c1[i], sizeof(V));
  }
  for (std::size_t r = 0; r < rows; ++r) {
    T* crow = c + r * ldc;
    const T* trow = tile + r * NR;
    if (beta == T(0)) {
      for (std::size_t j = 0; j < cols; ++j) crow[j] = alpha * trow[j];
    } else {
      for (std::size_t j = 0; j < cols; ++j) crow[j] = alpha * trow[j] + beta * crow[j];
    }
  }
}

template <class T>
struct AlignedBuffer {
  T* ptr = nullptr;
  std::size_t cap = 0;
  ~AlignedBuffer() { std::free(ptr); }
  T* get(std::size_t n) {
    if (n > cap) {
      std::free(ptr);
      const std::size_t bytes = ((n * sizeof(T) + 63) / 64) * 64;
      ptr = static_cast<T*>(std::aligned_alloc(64, bytes));
      if (!ptr) throw std::bad_alloc();
      cap = n;
    }
    return ptr;
  }
};

}  // namespace

template <class T>
void gemm(Trans ta, Trans tb, std::size_t M, std::size_t N, std::size_t K, T alpha, const T* A, std::size_t lda,
          const T* B, std::size_t ldb, T beta, T* C, std::size_t ldc) {
  using Bk = Blocking<T>;
  if (M == 0 || N == 0) return;
  if (K == 0) {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) C[i * ldc + j] = beta == T(0) ? T(0) : beta * C[i * ldc + j];
    return;
  }

  thread_local AlignedBuffer<T> bbuf;
  thread_local AlignedBuffer<T> abuf;

  for (std::size_t jc = 0; jc < N; jc += Bk::NC) {
    const std::size_t nc = std::min(Bk::NC, N - jc);
    const std::size_t panels = (nc + Bk::NR - 1) / Bk::NR;
    for (std::size_t pc = 0; pc < K; pc += Bk::KC) {
      const std::size_t kc = std::min(Bk::KC, K - pc);
      const T beta_eff = pc == 0 ? beta : T(1);
      T* bp = bbuf.get(panels * Bk::NR * kc);
      pack_b(tb, B, ldb, pc, kc, jc, nc, bp);

      for (std::size_t ic = 0; ic < M; ic += Bk::MC) {
        const std::size_t mc = std::min(Bk::MC, M - ic);
        const std::size_t slivers = (mc + Bk::MR - 1) / Bk::MR;
        T* ap = abuf.get(slivers * Bk::MR * kc);
        pack_a(ta, A, lda, ic, mc, pc, kc, ap);

#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t jr = 0; jr < static_cast<std::ptrdiff_t>(panels); ++jr) {
          const std::size_t j = static_cast<std::size_t>(jr);
          const std::size_t j0 = jc + j * Bk::NR;
          const std::size_t cols = std::min(Bk::NR, N - j0);
          const T* bpanel = bp + j * Bk::NR * kc;
          for (std::size_t s = 0; s < slivers; ++s) {
            const std::size_t i0 = ic + s * Bk::MR;
            micro_kernel<T>(kc, ap + s * Bk::MR * kc, bpanel, alpha, beta_eff, C + i0 * ldc + j0, ldc,
                            std::min(Bk::MR, M - i0), cols);
          }
        }
      }
    }
  }
}

template <class T>
void im2col(const ConvGeom& g, std::size_t batch, const T* images, T* col) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t plane = oh * ow;
  const std::size_t cols = batch * plane;
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(g.channels * g.kh * g.kw);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const std::size_t c = static_cast<std::size_t>(r) / (g.kh * g.kw);
    const std::size_t ki = (static_cast<std::size_t>(r) / g.kw) % g.kh;
    const std::size_t kj = static_cast<std::size_t>(r) % g.kw;
    T* dst = col + static_cast<std::size_t>(r) * cols;
    for (std::size_t n = 0; n < batch; ++n) {
      const T* img = images + (n * g.channels + c) * g.height * g.width;
      T* d = dst + n * plane;
      for (std::size_t y = 0; y < oh; ++y) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
        T* drow = d + y * ow;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
          std::fill(drow, drow + ow, T(0));
          continue;
        }
        const T* srow = img + static_cast<std::size_t>(iy) * g.width;
        if (g.stride == 1) {
          // Contiguous run with zero fill where the window hangs off the edge.
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pad);
          const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
          const std::ptrdiff_t hi =
              std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow), static_cast<std::ptrdiff_t>(g.width) - shift);
          std::fill(drow, drow + lo, T(0));
          if (hi > lo) std::memcpy(drow + lo, srow + lo + shift, static_cast<std::size_t>(hi - lo) * sizeof(T));
          std::fill(drow + std::max(hi, lo), drow + ow, T(0));
          continue;
        }
        for (std::size_t x = 0; x < ow; ++x) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
          drow[x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T(0) : srow[ix];
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeom& g, std::size_t batch, const T* col, T* images) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t plane = oh * ow;
  const std::size_t cols = batch * plane;
  const std::ptrdiff_t nch = static_cast<std::ptrdiff_t>(g.channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cc = 0; cc < nch; ++cc) {
    const std::size_t c = static_cast<std::size_t>(cc);
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t n = 0; n < batch; ++n) {
          T* img = images + (n * g.channels + c) * g.height * g.width;
          const T* s = src + n * plane;
          for (std::size_t y = 0; y < oh; ++y) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(y * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            T* irow = img + static_cast<std::size_t>(iy) * g.width;
            const T* srow = s + y * ow;
            for (std::size_t x = 0; x < ow; ++x) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(x * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) irow[ix] += srow[x];
            }
          }
        }
      }
    }
  }
}

void set_num_threads(int n) {
  if (n <= 0) n = omp_get_num_procs();
  omp_set_num_threads(n);
}

int num_threads() { return omp_get_max_threads(); }

int configure_threads_from_env() {
  if (const char* v = std::getenv("IBNKIT_THREADS"); v && *v) {
    const int n = std::atoi(v);
    if (n > 0) set_num_threads(n);
  }
  return num_threads();
}

template void gemm<float>(Trans, Trans, std::size_t, std::size_t, std::size_t, float, const float*, std::size_t,
                          const float*, std::size_t, float, float*, std::size_t);
template void gemm<double>(Trans, Trans, std::size_t, std::size_t, std::size_t, double, const double*, std::size_t,
                           const double*, std::size_t, double, double*, std::size_t);
template void im2col<float>(const ConvGeom&, std::size_t, const float*, float*);
template void im2col<double>(const ConvGeom&, std::size_t, const double*, double*);
template void col2im_add<float>(const ConvGeom&, std::size_t, const float*, float*);
template void col2im_add<double>(const ConvGeom&, std::size_t, const double*, double*);

}  // namespace ibn::kernels
