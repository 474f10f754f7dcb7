#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ibn/blocks.hpp"
#include "ibn/nn.hpp"
#include "ibn/ops.hpp"
#include "ibn/rng.hpp"
#include "ibn/tensor.hpp"

namespace testutil {

template <class T>
ibn::BasicTensor<T> randn(ibn::Shape shape, ibn::Rng& rng, double sd = 1.0, double mean = 0.0) {
  ibn::BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(mean, sd));
  return t;
}

template <class T>
ibn::BasicTensor<T> randu(ibn::Shape shape, ibn::Rng& rng, double lo, double hi) {
  ibn::BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
std::vector<T> to_vec(const ibn::BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <class T>
double max_abs_diff(const ibn::BasicTensor<T>& a, const ibn::BasicTensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <class T>
std::vector<ibn::BasicTensor<T>> learnable(const ibn::Block<T>& b) {
  std::vector<ibn::NamedTensor<T>> nt;
  b.collect("", nt);
  std::vector<ibn::BasicTensor<T>> out;
  for (auto& n : nt)
    if (n.role != ibn::TensorRole::RunningStat) out.push_back(n.tensor);
  return out;
}

// Replays Block::forward and returns the inputs of its two relus. A finite
// difference across a relu kink is meaningless, so gradient checks only use
// points whose relu inputs keep their sign under every ±eps perturbation.
template <class T>
std::vector<ibn::BasicTensor<T>> block_relu_inputs(ibn::Block<T>& b, const ibn::BasicTensor<T>& x) {
  using namespace ibn;
  BasicTensor<T> z1 = b.norm1.forward(conv2d(x, b.conv1));
  BasicTensor<T> h = b.norm2.forward(conv2d(relu(z1), b.conv2));
  BasicTensor<T> s = x;
  if (b.shortcut_conv) s = batch_norm(conv2d(x, *b.shortcut_conv), *b.shortcut_bn);
  BasicTensor<T> z2 = add(h, s);
  if (b.post) z2 = b.post->forward(z2);
  return {z1, z2};
}

template <class T>
std::vector<ibn::BasicTensor<T>> network_relu_inputs(ibn::Network<T>& net, const ibn::BasicTensor<T>& x) {
  using namespace ibn;
  BasicTensor<T> z = net.stem_norm.forward(conv2d(x, net.stem_conv));
  std::vector<BasicTensor<T>> out{z};
  BasicTensor<T> h = relu(z);
  for (auto& g : net.groups)
    for (auto& b : g) {
      auto zs = block_relu_inputs(b, h);
      out.insert(out.end(), zs.begin(), zs.end());
      h = relu(zs.back());
    }
  return out;
}

template <class T>
bool signs_equal(const std::vector<ibn::BasicTensor<T>>& a, const std::vector<ibn::BasicTensor<T>>& b) {
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].numel(); ++i)
      if ((a[k][i] > 0) != (b[k][i] > 0)) return false;
  return true;
}

// True when no single-coordinate ±eps step of any leaf flips the sign of a
// value returned by `pre`.
template <class T>
bool kink_free(const std::function<std::vector<ibn::BasicTensor<T>>()>& pre, std::vector<ibn::BasicTensor<T>> leaves,
               double eps) {
  ibn::NoGradGuard guard;
  const auto base = pre();
  for (auto& x : leaves) {
    auto d = x.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T saved = d[i];
      for (double s : {eps, -eps}) {
        d[i] = static_cast<T>(saved + s);
        const bool same = signs_equal(base, pre());
        d[i] = saved;
        if (!same) return false;
      }
    }
  }
  return true;
}

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "ibnkit_test_XXXXXX").string();
    path_ = mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace testutil
