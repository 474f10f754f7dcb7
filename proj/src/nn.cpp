#include "ibn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ibn/kernels.hpp"

namespace ibn {

using kernels::Trans;

namespace {

void require_nchw(const Shape& s, const char* who) {
  if (s.size() != 4) throw ShapeError(std::string(who) + ": expected an NCHW tensor, got " + shape_str(s));
}

template <class U, class T>
BasicTensor<U> cast_param(const BasicTensor<T>& t) {
  if (!t.defined()) return {};
  BasicTensor<U> out = t.template cast<U>();
  out.set_requires_grad(t.requires_grad());
  return out;
}

}  // namespace

template <class T>
NormState<T> NormState<T>::batch(std::size_t channels) {
  NormState s;
  s.kind = NormKind::BatchNorm;
  s.num_channels = channels;
  s.gamma = BasicTensor<T>::full({channels}, T(1));
  s.beta = BasicTensor<T>::zeros({channels});
  s.gamma.set_requires_grad();
  s.beta.set_requires_grad();
  s.running_mean = BasicTensor<T>::zeros({channels});
  s.running_var = BasicTensor<T>::full({channels}, T(1));
  return s;
}

template <class T>
NormState<T> NormState<T>::instance(std::size_t channels) {
  NormState s;
  s.kind = NormKind::InstanceNorm;
  s.num_channels = channels;
  s.gamma = BasicTensor<T>::full({channels}, T(1));
  s.beta = BasicTensor<T>::zeros({channels});
  s.gamma.set_requires_grad();
  s.beta.set_requires_grad();
  return s;
}

template <class T>
template <class U>
NormState<U> NormState<T>::cast() const {
  NormState<U> s;
  s.kind = kind;
  s.num_channels = num_channels;
  s.gamma = cast_param<U>(gamma);
  s.beta = cast_param<U>(beta);
  s.running_mean = cast_param<U>(running_mean);
  s.running_var = cast_param<U>(running_var);
  s.eps = static_cast<U>(eps);
  s.momentum = static_cast<U>(momentum);
  s.mode = mode;
  return s;
}

template <class T>
template <class U>
ConvParams<U> ConvParams<T>::cast() const {
  ConvParams<U> p;
  p.weight = cast_param<U>(weight);
  if (bias) p.bias = cast_param<U>(*bias);
  p.stride = stride;
  p.padding = padding;
  return p;
}

template <class T>
template <class U>
LinearParams<U> LinearParams<T>::cast() const {
  return LinearParams<U>{cast_param<U>(weight), cast_param<U>(bias)};
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

// Reusable per-thread buffers; conv calls never nest so a few slots suffice.
template <class T>
T* scratch(int slot, std::size_t n) {
  thread_local std::vector<T> bufs[4];
  auto& b = bufs[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

}  // namespace

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const ConvParams<T>& p) {
  require_nchw(x.shape(), "conv2d");
  const auto& ws = p.weight.shape();
  if (ws.size() != 4) throw ShapeError("conv2d: weight must be [out,in,kh,kw], got " + shape_str(ws));
  if (x.dim(1) != ws[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (p.stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const kernels::ConvGeom g{x.dim(1), x.dim(2), x.dim(3), ws[2], ws[3], p.stride, p.padding};
  if (g.height + 2 * g.pad < g.kh || g.width + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_str({g.kh, g.kw}) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  const std::size_t N = x.dim(0), O = ws[0];
  const std::size_t OH = g.out_h(), OW = g.out_w(), P = OH * OW;
  const std::size_t CK = g.channels * g.kh * g.kw;
  const std::size_t NP = N * P;
  if (p.bias && p.bias->numel() != O) throw ShapeError("conv2d: bias length does not match output channels");

  T* col = scratch<T>(0, CK * NP);
  kernels::im2col<T>(g, N, x.data().data(), col);
  T* out2 = scratch<T>(1, O * NP);
  kernels::gemm<T>(Trans::No, Trans::No, O, NP, CK, T(1), p.weight.data().data(), CK, col, NP, T(0), out2, NP);

  BasicTensor<T> out({N, O, OH, OW});
  auto y = out.data();
  const T* b = p.bias ? p.bias->data().data() : nullptr;
#pragma omp parallel for collapse(2) schedule(static)
  for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n)
    for (std::ptrdiff_t o = 0; o < static_cast<std::ptrdiff_t>(O); ++o) {
      const T* src = out2 + static_cast<std::size_t>(o) * NP + static_cast<std::size_t>(n) * P;
      T* dst = y.data() + (static_cast<std::size_t>(n) * O + static_cast<std::size_t>(o)) * P;
      const T bo = b ? b[o] : T(0);
      for (std::size_t i = 0; i < P; ++i) dst[i] = src[i] + bo;
    }

  std::vector<BasicTensor<T>> inputs{x, p.weight};
  if (p.bias) inputs.push_back(*p.bias);
  auto xn = x.node();
  auto wn = p.weight.node();
  Tape<T>::current().record(
      "conv2d", std::move(inputs), out,
      [xn, wn, g, N, O, P, CK, NP](std::span<const T> gy, std::span<std::vector<T>* const> gin) {
        T* g2 = scratch<T>(1, O * NP);
#pragma omp parallel for collapse(2) schedule(static)
        for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n)
          for (std::ptrdiff_t o = 0; o < static_cast<std::ptrdiff_t>(O); ++o)
            std::copy_n(gy.data() + (static_cast<std::size_t>(n) * O + static_cast<std::size_t>(o)) * P, P,
                        g2 + static_cast<std::size_t>(o) * NP + static_cast<std::size_t>(n) * P);
        if (gin[1]) {
          T* col = scratch<T>(0, CK * NP);
          kernels::im2col<T>(g, N, xn->data.data(), col);
          kernels::gemm<T>(Trans::No, Trans::Yes, O, CK, NP, T(1), g2, NP, col, NP, T(1), gin[1]->data(), CK);
        }
        if (gin.size() > 2 && gin[2]) {
          auto& gb = *gin[2];
          for (std::size_t o = 0; o < O; ++o) {
            double acc = 0.0;
            const T* row = g2 + o * NP;
            for (std::size_t i = 0; i < NP; ++i) acc += row[i];
            gb[o] += static_cast<T>(acc);
          }
        }
        if (!gin[0]) return;
        const std::size_t C = g.channels, KK = g.kh * g.kw, HW = g.height * g.width;
        if (g.stride == 1 && g.pad < g.kh && g.pad < g.kw && g.kh == g.kw) {
          // Stride 1: the input gradient is a full correlation of dy with the
          // flipped, transposed kernel, which avoids the large col2im scatter.
          const kernels::ConvGeom gt{O, g.out_h(), g.out_w(), g.kh, g.kw, 1, g.kh - 1 - g.pad};
          T* wt = scratch<T>(2, C * O * KK);
          const T* w = wn->data.data();
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t k = 0; k < KK; ++k) wt[(c * O + o) * KK + (KK - 1 - k)] = w[(o * C + c) * KK + k];
          const std::size_t NHW = N * HW;
          T* col = scratch<T>(0, O * KK * NHW);
          kernels::im2col<T>(gt, N, gy.data(), col);
          T* dx2 = scratch<T>(1, C * NHW);
          kernels::gemm<T>(Trans::No, Trans::No, C, NHW, O * KK, T(1), wt, O * KK, col, NHW, T(0), dx2, NHW);
          T* dx = gin[0]->data();
#pragma omp parallel for collapse(2) schedule(static)
          for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n)
            for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(C); ++c) {
              const T* src = dx2 + static_cast<std::size_t>(c) * NHW + static_cast<std::size_t>(n) * HW;
              T* dst = dx + (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(c)) * HW;
              for (std::size_t i = 0; i < HW; ++i) dst[i] += src[i];
            }
          return;
        }
        T* dcol = scratch<T>(0, CK * NP);
        kernels::gemm<T>(Trans::Yes, Trans::No, CK, NP, O, T(1), wn->data.data(), CK, g2, NP, T(0), dcol, NP);
        kernels::col2im_add<T>(g, N, dcol, gin[0]->data());
      });
  return out;
}

// ---------------------------------------------------------------------------
// normalizers

namespace {

// Shared backward for both normalizers once statistics are fixed per group:
// dx = gamma * invstd / M * (M*dy - sum(dy) - xhat * sum(dy*xhat)).
template <class T>
void standardize_backward(const T* dy, const T* xhat, std::size_t m, T gamma, double invstd, T* dx, double& sum_dy,
                          double& sum_dy_xhat) {
  double s0 = 0.0, s1 = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    s0 += dy[i];
    s1 += static_cast<double>(dy[i]) * xhat[i];
  }
  sum_dy = s0;
  sum_dy_xhat = s1;
  if (!dx) return;
  const double k = static_cast<double>(gamma) * invstd / static_cast<double>(m);
  const double md = static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    dx[i] += static_cast<T>(k * (md * dy[i] - s0 - xhat[i] * s1));
  }
}

template <class T>
void check_norm_input(const BasicTensor<T>& x, const NormState<T>& s, NormKind want, const char* who) {
  require_nchw(x.shape(), who);
  if (s.kind != want) throw std::invalid_argument(std::string(who) + ": norm state has the wrong kind");
  if (x.dim(1) != s.num_channels) {
    throw ShapeError(std::string(who) + ": input has " + std::to_string(x.dim(1)) + " channels, state has " +
                     std::to_string(s.num_channels));
  }
}

}  // namespace

template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, NormState<T>& s) {
  check_norm_input(x, s, NormKind::BatchNorm, "batch_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const std::size_t M = N * HW;
  const bool train = s.mode == Mode::Train;
  if (train && M < 2) throw std::invalid_argument("batch_norm: Train mode needs N*H*W >= 2, got " + std::to_string(M));

  BasicTensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto invstd = std::make_shared<std::vector<double>>(C);
  const T* xs = x.data().data();
  T* ys = out.data().data();
  const T* gamma = s.gamma.data().data();
  const T* beta = s.beta.data().data();
  T* rmean = s.running_mean.data().data();
  T* rvar = s.running_var.data().data();

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(C); ++cc) {
    const std::size_t c = static_cast<std::size_t>(cc);
    double mu, var;
    if (train) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = xs + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) acc += src[i];
      }
      mu = acc / static_cast<double>(M);
      double sq = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = xs + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = src[i] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(M);
      const double m = static_cast<double>(s.momentum);
      rmean[c] = static_cast<T>((1.0 - m) * rmean[c] + m * mu);
      rvar[c] = static_cast<T>((1.0 - m) * rvar[c] + m * var);
    } else {
      mu = rmean[c];
      var = rvar[c];
    }
    const double is = 1.0 / std::sqrt(var + static_cast<double>(s.eps));
    (*invstd)[c] = is;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = static_cast<T>((xs[off + i] - mu) * is);
        (*xhat)[off + i] = h;
        ys[off + i] = gamma[c] * h + beta[c];
      }
    }
  }

  auto gn = s.gamma.node();
  Tape<T>::current().record(
      "batch_norm", {x, s.gamma, s.beta}, out,
      [xhat, invstd, gn, N, C, HW, M, train](std::span<const T> gy, std::span<std::vector<T>* const> gin) {
        std::vector<T>* gx = gin[0];
        std::vector<T>* gg = gin[1];
        std::vector<T>* gb = gin[2];
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(C); ++cc) {
          const std::size_t c = static_cast<std::size_t>(cc);
          const T gamma = gn->data[c];
          const double is = (*invstd)[c];
          double s0 = 0.0, s1 = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              s0 += gy[off + i];
              s1 += static_cast<double>(gy[off + i]) * (*xhat)[off + i];
            }
          }
          if (gg) (*gg)[c] += static_cast<T>(s1);
          if (gb) (*gb)[c] += static_cast<T>(s0);
          if (!gx) continue;
          const double k = static_cast<double>(gamma) * is;
          const double md = static_cast<double>(M);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              const double d = train ? k / md * (md * gy[off + i] - s0 - (*xhat)[off + i] * s1) : k * gy[off + i];
              (*gx)[off + i] += static_cast<T>(d);
            }
          }
        }
      });
  return out;
}

template <class T>
BasicTensor<T> instance_norm(const BasicTensor<T>& x, const NormState<T>& s) {
  check_norm_input(x, s, NormKind::InstanceNorm, "instance_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW < 2) throw std::invalid_argument("instance_norm: needs H*W >= 2, got " + std::to_string(HW));

  BasicTensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto invstd = std::make_shared<std::vector<double>>(N * C);
  const T* xs = x.data().data();
  T* ys = out.data().data();
  const T* gamma = s.gamma.data().data();
  const T* beta = s.beta.data().data();
  const double eps = static_cast<double>(s.eps);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(N * C); ++k) {
    const std::size_t c = static_cast<std::size_t>(k) % C;
    const std::size_t off = static_cast<std::size_t>(k) * HW;
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += xs[off + i];
    const double mu = acc / static_cast<double>(HW);
    double sq = 0.0;
    for (std::size_t i = 0; i < HW; ++i) {
      const double d = xs[off + i] - mu;
      sq += d * d;
    }
    const double is = 1.0 / std::sqrt(sq / static_cast<double>(HW) + eps);
    (*invstd)[static_cast<std::size_t>(k)] = is;
    for (std::size_t i = 0; i < HW; ++i) {
      const T h = static_cast<T>((xs[off + i] - mu) * is);
      (*xhat)[off + i] = h;
      ys[off + i] = gamma[c] * h + beta[c];
    }
  }

  auto gn = s.gamma.node();
  Tape<T>::current().record(
      "instance_norm", {x, s.gamma, s.beta}, out,
      [xhat, invstd, gn, N, C, HW](std::span<const T> gy, std::span<std::vector<T>* const> gin) {
        std::vector<T>* gx = gin[0];
        std::vector<T>* gg = gin[1];
        std::vector<T>* gb = gin[2];
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(C); ++cc) {
          const std::size_t c = static_cast<std::size_t>(cc);
          double tg = 0.0, tb = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t k = n * C + c;
            const std::size_t off = k * HW;
            double s0, s1;
            standardize_backward<T>(gy.data() + off, xhat->data() + off, HW, gn->data[c], (*invstd)[k],
                                    gx ? gx->data() + off : nullptr, s0, s1);
            tg += s1;
            tb += s0;
          }
          if (gg) (*gg)[c] += static_cast<T>(tg);
          if (gb) (*gb)[c] += static_cast<T>(tb);
        }
      });
  return out;
}

template <class T>
BasicTensor<T> normalize(const BasicTensor<T>& x, NormState<T>& s) {
  return s.kind == NormKind::BatchNorm ? batch_norm(x, s) : instance_norm(x, s);
}

// ---------------------------------------------------------------------------
// pointwise, pooling, head

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(xs.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) ys[i] = xs[i] > T(0) ? xs[i] : T(0);
  auto xn = x.node();
  Tape<T>::current().record("relu", {x}, out, [xn](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    if (auto* gx = gin[0]) {
      const T* xv = xn->data.data();
      const T* gs = g.data();
      T* gd = gx->data();
      const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(g.size());
#pragma omp parallel for simd schedule(static)
      for (std::ptrdiff_t i = 0; i < n; ++i) gd[i] += xv[i] > T(0) ? gs[i] : T(0);
    }
  });
  return out;
}

template <class T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_nchw(x.shape(), "max_pool2d");
  if (kernel == 0 || stride == 0) throw std::invalid_argument("max_pool2d: kernel and stride must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel > H || kernel > W) {
    throw ShapeError("max_pool2d: window " + std::to_string(kernel) + " exceeds input " + shape_str(x.shape()));
  }
  const std::size_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  BasicTensor<T> out({N, C, OH, OW});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.numel());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = base + oy * stride * W + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = base + (oy * stride + ky) * W + ox * stride + kx;
            if (xs[idx] > xs[best]) best = idx;
          }
        const std::size_t o = (nc * OH + oy) * OW + ox;
        ys[o] = xs[best];
        (*arg)[o] = best;
      }
  }
  Tape<T>::current().record("max_pool2d", {x}, out, [arg](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    if (auto* gx = gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[(*arg)[i]] += g[i];
  });
  return out;
}

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  require_nchw(x.shape(), "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  BasicTensor<T> out({N, C});
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t k = 0; k < N * C; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += xs[k * HW + i];
    ys[k] = static_cast<T>(acc / static_cast<double>(HW));
  }
  Tape<T>::current().record("global_avg_pool", {x}, out,
                            [HW](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              if (auto* gx = gin[0]) {
                                const T inv = T(1) / static_cast<T>(HW);
                                for (std::size_t k = 0; k < g.size(); ++k)
                                  for (std::size_t i = 0; i < HW; ++i) (*gx)[k * HW + i] += g[k] * inv;
                              }
                            });
  return out;
}

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const LinearParams<T>& p) {
  if (x.rank() != 2 || p.weight.rank() != 2 || x.dim(1) != p.weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(p.weight.shape()));
  }
  const std::size_t N = x.dim(0), F = x.dim(1), O = p.weight.dim(0);
  if (p.bias.numel() != O) throw ShapeError("linear: bias length does not match output features");
  BasicTensor<T> out({N, O});
  kernels::gemm<T>(Trans::No, Trans::Yes, N, O, F, T(1), x.data().data(), F, p.weight.data().data(), F, T(0),
                   out.data().data(), O);
  auto ys = out.data();
  auto bs = p.bias.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) ys[n * O + o] += bs[o];
  auto xn = x.node();
  auto wn = p.weight.node();
  Tape<T>::current().record("linear", {x, p.weight, p.bias}, out,
                            [xn, wn, N, F, O](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              if (gin[0])
                                kernels::gemm<T>(Trans::No, Trans::No, N, F, O, T(1), g.data(), O, wn->data.data(), F,
                                                 T(1), gin[0]->data(), F);
                              if (gin[1])
                                kernels::gemm<T>(Trans::Yes, Trans::No, O, F, N, T(1), g.data(), O, xn->data.data(), F,
                                                 T(1), gin[1]->data(), F);
                              if (gin[2])
                                for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t o = 0; o < O; ++o) (*gin[2])[o] += g[n * O + o];
                            });
  return out;
}

template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::uint16_t> labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,K], got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw ShapeError("softmax_cross_entropy: label count does not match batch size");
  if (N == 0) throw std::invalid_argument("softmax_cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<double>>(N * K);
  auto lab = std::make_shared<std::vector<std::uint16_t>>(labels.begin(), labels.end());
  auto z = logits.data();
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[n]) + " out of range for " +
                              std::to_string(K) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(z[n * K + k]));
    double se = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double e = std::exp(static_cast<double>(z[n * K + k]) - mx);
      (*probs)[n * K + k] = e;
      se += e;
    }
    for (std::size_t k = 0; k < K; ++k) (*probs)[n * K + k] /= se;
    loss += std::log(se) + mx - static_cast<double>(z[n * K + labels[n]]);
  }
  BasicTensor<T> out = BasicTensor<T>::scalar(static_cast<T>(loss / static_cast<double>(N)));
  Tape<T>::current().record("softmax_cross_entropy", {logits}, out,
                            [probs, lab, N, K](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              if (auto* gz = gin[0]) {
                                const double s = static_cast<double>(g[0]) / static_cast<double>(N);
                                for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t k = 0; k < K; ++k) {
                                    const double t = (*lab)[n] == k ? 1.0 : 0.0;
                                    (*gz)[n * K + k] += static_cast<T>(s * ((*probs)[n * K + k] - t));
                                  }
                              }
                            });
  return out;
}

template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  require_nchw(x.shape(), "slice_channels");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (begin >= end || end > C) {
    throw std::out_of_range("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") invalid for " + std::to_string(C) + " channels");
  }
  const std::size_t W = end - begin;
  BasicTensor<T> out({N, W, x.dim(2), x.dim(3)});
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t n = 0; n < N; ++n)
    std::copy_n(xs.data() + (n * C + begin) * HW, W * HW, ys.data() + n * W * HW);
  Tape<T>::current().record("slice_channels", {x}, out,
                            [N, C, HW, W, begin](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              if (auto* gx = gin[0])
                                for (std::size_t n = 0; n < N; ++n) {
                                  T* dst = gx->data() + (n * C + begin) * HW;
                                  const T* src = g.data() + n * W * HW;
                                  for (std::size_t i = 0; i < W * HW; ++i) dst[i] += src[i];
                                }
                            });
  return out;
}

template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_nchw(a.shape(), "concat_channels");
  require_nchw(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ outside C");
  }
  const std::size_t N = a.dim(0), CA = a.dim(1), CB = b.dim(1), HW = a.dim(2) * a.dim(3);
  BasicTensor<T> out({N, CA + CB, a.dim(2), a.dim(3)});
  auto ys = out.data();
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data().data() + n * CA * HW, CA * HW, ys.data() + n * (CA + CB) * HW);
    std::copy_n(b.data().data() + n * CB * HW, CB * HW, ys.data() + (n * (CA + CB) + CA) * HW);
  }
  Tape<T>::current().record("concat_channels", {a, b}, out,
                            [N, CA, CB, HW](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              for (std::size_t n = 0; n < N; ++n) {
                                const T* src = g.data() + n * (CA + CB) * HW;
                                if (gin[0]) {
                                  T* d = gin[0]->data() + n * CA * HW;
                                  for (std::size_t i = 0; i < CA * HW; ++i) d[i] += src[i];
                                }
                                if (gin[1]) {
                                  T* d = gin[1]->data() + n * CB * HW;
                                  for (std::size_t i = 0; i < CB * HW; ++i) d[i] += src[CA * HW + i];
                                }
                              }
                            });
  return out;
}

#define IBN_INSTANTIATE(T)                                                                                 \
  template struct NormState<T>;                                                                            \
  template struct ConvParams<T>;                                                                           \
  template struct LinearParams<T>;                                                                         \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const ConvParams<T>&);                             \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, NormState<T>&);                                \
  template BasicTensor<T> instance_norm(const BasicTensor<T>&, const NormState<T>&);                       \
  template BasicTensor<T> normalize(const BasicTensor<T>&, NormState<T>&);                                 \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> max_pool2d(const BasicTensor<T>&, std::size_t, std::size_t);                     \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                          \
  template BasicTensor<T> linear(const BasicTensor<T>&, const LinearParams<T>&);                           \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const std::uint16_t>);    \
  template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::size_t, std::size_t);                 \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);

IBN_INSTANTIATE(float)
IBN_INSTANTIATE(double)
#undef IBN_INSTANTIATE

template NormState<double> NormState<float>::cast<double>() const;
template NormState<float> NormState<double>::cast<float>() const;
template ConvParams<double> ConvParams<float>::cast<double>() const;
template ConvParams<float> ConvParams<double>::cast<float>() const;
template LinearParams<double> LinearParams<float>::cast<double>() const;
template LinearParams<float> LinearParams<double>::cast<float>() const;
template NormState<float> NormState<float>::cast<float>() const;
template ConvParams<float> ConvParams<float>::cast<float>() const;
template LinearParams<float> LinearParams<float>::cast<float>() const;

}  // namespace ibn
