#pragma once

#include <functional>
#include <vector>

#include "ibn/tensor.hpp"

namespace ibn {

// Compares the tape gradient of a scalar function with central differences.
// Returns max_i |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Throws std::domain_error if f produces a non-finite value.
template <class T>
double finite_difference_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                               double eps = 1e-3);

// Same check for a closure over several leaves (e.g. every parameter of a
// model); one backward pass supplies all analytic gradients.
template <class T>
double finite_difference_check(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> leaves,
                               double eps = 1e-3);

}  // namespace ibn
