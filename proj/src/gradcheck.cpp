#include "ibn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ibn {

namespace {

template <class T>
double eval_scalar(const std::function<BasicTensor<T>()>& f) {
  NoGradGuard guard;
  const double v = static_cast<double>(f().item());
  if (!std::isfinite(v)) throw std::domain_error("finite_difference_check: function returned a non-finite value");
  return v;
}

}  // namespace

template <class T>
double finite_difference_check(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> leaves,
                               double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  auto& tape = Tape<T>::current();
  tape.clear();
  std::vector<bool> had_flag;
  for (auto& x : leaves) {
    had_flag.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    BasicTensor<T> loss = f();
    backward(loss);
  }
  tape.clear();

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& x = leaves[li];
    std::vector<T> analytic = x.has_grad() ? std::vector<T>(x.grad().begin(), x.grad().end())
                                           : std::vector<T>(x.numel(), T(0));
    auto data = x.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T saved = data[i];
      data[i] = static_cast<T>(saved + eps);
      const T up = data[i];
      const double fp = eval_scalar<T>(f);
      data[i] = static_cast<T>(saved - eps);
      const T down = data[i];
      const double fm = eval_scalar<T>(f);
      data[i] = saved;
      const double numeric = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
      const double a = static_cast<double>(analytic[i]);
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
    x.set_requires_grad(had_flag[li]);
  }
  return worst;
}

template <class T>
double finite_difference_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                               double eps) {
  std::function<BasicTensor<T>()> g = [&f, x]() { return f(x); };
  return finite_difference_check<T>(g, std::vector<BasicTensor<T>>{x}, eps);
}

template double finite_difference_check<float>(const std::function<BasicTensor<float>()>&,
                                               std::vector<BasicTensor<float>>, double);
template double finite_difference_check<double>(const std::function<BasicTensor<double>()>&,
                                                std::vector<BasicTensor<double>>, double);
template double finite_difference_check<float>(const std::function<BasicTensor<float>(const BasicTensor<float>&)>&,
                                               BasicTensor<float>, double);
template double finite_difference_check<double>(
    const std::function<BasicTensor<double>(const BasicTensor<double>&)>&, BasicTensor<double>, double);

}  // namespace ibn
