#include "ibn/ops.hpp"

#include <algorithm>

#include "ibn/kernels.hpp"

namespace ibn {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

namespace {

// Row-major strides of `s` laid against an output of rank `rank`, with zero
// stride on broadcast dimensions.
std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> st(rank, 0);
  std::size_t acc = 1;
  for (std::size_t k = s.size(); k-- > 0;) {
    const std::size_t oi = k + (rank - s.size());
    st[oi] = s[k] == 1 && out[oi] != 1 ? 0 : acc;
    acc *= s[k];
  }
  return st;
}

// Calls fn(out_index, a_offset, b_offset) for every output element.
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        Fn&& fn) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      oa += sa[k];
      ob += sb[k];
      if (idx[k] < out[k]) break;
      oa -= sa[k] * out[k];
      ob -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

template <class T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinOp op, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  BasicTensor<T> out(out_shape);
  auto o = out.data();
  const auto x = a.data();
  const auto y = b.data();
  const bool same = a.shape() == b.shape();

  auto apply = [op](T u, T v) {
    switch (op) {
      case BinOp::Add: return u + v;
      case BinOp::Sub: return u - v;
      default: return u * v;
    }
  };

  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply(x[i], y[i]);
  } else {
    sa = broadcast_strides(a.shape(), out_shape);
    sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = apply(x[ia], y[ib]); });
  }

  auto an = a.node();
  auto bn = b.node();
  Tape<T>::current().record(
      name, {a, b}, out,
      [an, bn, op, same, out_shape, sa, sb](std::span<const T> g, std::span<std::vector<T>* const> gin) {
        std::vector<T>* ga = gin[0];
        std::vector<T>* gb = gin[1];
        const auto& xa = an->data;
        const auto& xb = bn->data;
        auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
          switch (op) {
            case BinOp::Add:
              if (ga) (*ga)[ia] += g[i];
              if (gb) (*gb)[ib] += g[i];
              break;
            case BinOp::Sub:
              if (ga) (*ga)[ia] += g[i];
              if (gb) (*gb)[ib] -= g[i];
              break;
            case BinOp::Mul:
              if (ga) (*ga)[ia] += g[i] * xb[ib];
              if (gb) (*gb)[ib] += g[i] * xa[ia];
              break;
          }
        };
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i) step(i, i, i);
        } else {
          for_each_broadcast(out_shape, sa, sb, step);
        }
      });
  return out;
}

struct Reduction {
  Shape out_shape;
  std::vector<std::size_t> out_stride;  // per input axis; 0 on reduced axes
  std::size_t count = 1;
};

Reduction plan_reduction(const Shape& in, const std::vector<std::size_t>& axes, const char* who) {
  if (axes.empty()) throw std::invalid_argument(std::string(who) + ": empty reduction set");
  std::vector<bool> reduced(in.size(), false);
  for (auto ax : axes) {
    if (ax >= in.size()) {
      throw std::invalid_argument(std::string(who) + ": axis " + std::to_string(ax) + " out of range for shape " +
                                  shape_str(in));
    }
    if (reduced[ax]) throw std::invalid_argument(std::string(who) + ": duplicate axis " + std::to_string(ax));
    reduced[ax] = true;
  }
  Reduction r;
  for (std::size_t k = 0; k < in.size(); ++k) {
    if (reduced[k]) {
      r.count *= in[k];
    } else {
      r.out_shape.push_back(in[k]);
    }
  }
  if (r.count == 0) throw std::invalid_argument(std::string(who) + ": reduction over zero elements");
  r.out_stride.assign(in.size(), 0);
  std::size_t acc = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    if (!reduced[k]) {
      r.out_stride[k] = acc;
      acc *= in[k];
    }
  }
  return r;
}

// Maps every input element to its output slot.
std::vector<std::size_t> reduction_index(const Shape& in, const Reduction& r) {
  std::vector<std::size_t> map(shape_numel(in));
  std::vector<std::size_t> zero(in.size(), 0);
  for_each_broadcast(in, r.out_stride, zero, [&](std::size_t i, std::size_t o, std::size_t) { map[i] = o; });
  return map;
}

}  // namespace

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinOp::Add, "add");
}
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinOp::Sub, "sub");
}
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinOp::Mul, "mul");
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + s;
  Tape<T>::current().record("add_scalar", {a}, out, [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    if (auto* ga = gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
  return out;
}

template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  Tape<T>::current().record("mul_scalar", {a}, out, [s](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    if (auto* ga = gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * s;
  });
  return out;
}

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  BasicTensor<T> out({M, N});
  using kernels::Trans;
  kernels::gemm<T>(Trans::No, Trans::No, M, N, K, T(1), a.data().data(), K, b.data().data(), N, T(0),
                   out.data().data(), N);
  auto an = a.node();
  auto bn = b.node();
  Tape<T>::current().record("matmul", {a, b}, out,
                            [an, bn, M, N, K](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              if (gin[0]) {
                                kernels::gemm<T>(Trans::No, Trans::Yes, M, K, N, T(1), g.data(), N, bn->data.data(), N,
                                                 T(1), gin[0]->data(), K);
                              }
                              if (gin[1]) {
                                kernels::gemm<T>(Trans::Yes, Trans::No, K, N, M, T(1), an->data.data(), K, g.data(), N,
                                                 T(1), gin[1]->data(), N);
                              }
                            });
  return out;
}

template <class T>
BasicTensor<T> reduce_mean(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  const Reduction r = plan_reduction(x.shape(), axes, "reduce_mean");
  auto map = std::make_shared<std::vector<std::size_t>>(reduction_index(x.shape(), r));
  BasicTensor<T> out(r.out_shape);
  std::vector<double> acc(out.numel(), 0.0);
  auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) acc[(*map)[i]] += xs[i];
  auto o = out.data();
  const double cnt = static_cast<double>(r.count);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(acc[i] / cnt);
  Tape<T>::current().record("reduce_mean", {x}, out,
                            [map, cnt](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              if (auto* gx = gin[0])
                                for (std::size_t i = 0; i < gx->size(); ++i)
                                  (*gx)[i] += static_cast<T>(g[(*map)[i]] / cnt);
                            });
  return out;
}

template <class T>
BasicTensor<T> reduce_var(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  const Reduction r = plan_reduction(x.shape(), axes, "reduce_var");
  auto map = std::make_shared<std::vector<std::size_t>>(reduction_index(x.shape(), r));
  const std::size_t nout = shape_numel(r.out_shape);
  auto xs = x.data();
  const double cnt = static_cast<double>(r.count);
  auto mu = std::make_shared<std::vector<double>>(nout, 0.0);
  for (std::size_t i = 0; i < xs.size(); ++i) (*mu)[(*map)[i]] += xs[i];
  for (auto& m : *mu) m /= cnt;
  std::vector<double> acc(nout, 0.0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double d = xs[i] - (*mu)[(*map)[i]];
    acc[(*map)[i]] += d * d;
  }
  BasicTensor<T> out(r.out_shape);
  auto o = out.data();
  for (std::size_t i = 0; i < nout; ++i) o[i] = static_cast<T>(acc[i] / cnt);
  auto xn = x.node();
  Tape<T>::current().record("reduce_var", {x}, out,
                            [map, mu, xn, cnt](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              if (auto* gx = gin[0]) {
                                for (std::size_t i = 0; i < gx->size(); ++i) {
                                  const std::size_t k = (*map)[i];
                                  (*gx)[i] += static_cast<T>(g[k] * 2.0 * (xn->data[i] - (*mu)[k]) / cnt);
                                }
                              }
                            });
  return out;
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  BasicTensor<T> out = BasicTensor<T>::scalar(static_cast<T>(acc));
  Tape<T>::current().record("sum", {x}, out, [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    if (auto* gx = gin[0])
      for (auto& v : *gx) v += g[0];
  });
  return out;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return mul_scalar(sum(x), T(1) / static_cast<T>(n));
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  BasicTensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  Tape<T>::current().record("reshape", {x}, out, [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    if (auto* gx = gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
  return out;
}

#define IBN_INSTANTIATE(T)                                                                        \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                   \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, T);                                   \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> reduce_mean(const BasicTensor<T>&, const std::vector<std::size_t>&);    \
  template BasicTensor<T> reduce_var(const BasicTensor<T>&, const std::vector<std::size_t>&);     \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                             \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                            \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);

IBN_INSTANTIATE(float)
IBN_INSTANTIATE(double)
#undef IBN_INSTANTIATE

}  // namespace ibn
