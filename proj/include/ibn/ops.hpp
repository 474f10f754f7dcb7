#pragma once

#include <vector>

#include "ibn/tensor.hpp"

namespace ibn {

// Elementwise arithmetic with numpy-style broadcasting. Gradients are
// sum-reduced over broadcast dimensions.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s);
template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T s);

Shape broadcast_shape(const Shape& a, const Shape& b);

// [M,K] x [K,N] -> [M,N]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Mean / biased (1/N) variance over `axes`; reduced axes are dropped.
template <class T>
BasicTensor<T> reduce_mean(const BasicTensor<T>& x, const std::vector<std::size_t>& axes);
template <class T>
BasicTensor<T> reduce_var(const BasicTensor<T>& x, const std::vector<std::size_t>& axes);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

template <class T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return add(a, b);
}
template <class T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return sub(a, b);
}
template <class T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return mul(a, b);
}

}  // namespace ibn
