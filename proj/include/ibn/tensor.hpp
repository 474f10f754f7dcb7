#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ibn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Storage plus autograd metadata. Shared between tensor handles and the tape.
template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches this leaf
  bool requires_grad = false;
  bool from_tape = false;  // output of a recorded op, i.e. not a leaf
};

// Handle semantics: copies share storage. Use clone() for a deep copy.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor full(Shape shape, T v) { return BasicTensor(std::move(shape), v); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T item() const;
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return !node_->from_tape; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return node_->grad; }
  void zero_grad();

  BasicTensor clone() const;    // deep copy of data, detached
  BasicTensor detach() const { return clone(); }

  template <class U>
  BasicTensor<U> cast() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  explicit BasicTensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Backward rule: reads the output gradient, adds into each input gradient
// buffer. A null buffer means that input does not need a gradient.
template <class T>
using BackwardRule = std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in)>;

template <class T>
struct TapeOp {
  std::string name;
  std::vector<std::shared_ptr<TensorNode<T>>> inputs;
  std::shared_ptr<TensorNode<T>> output;
  BackwardRule<T> backward;
};

// Ordered record of executed differentiable ops. One tape per thread and
// scalar type; training loops clear it after each step.
template <class T>
class Tape {
 public:
  static Tape& current();

  // Records `out` as produced by `inputs` when grad mode is on and any input
  // needs a gradient; otherwise marks `out` as a constant.
  void record(std::string name, std::vector<BasicTensor<T>> inputs, BasicTensor<T>& out, BackwardRule<T> rule);

  void clear() { ops_.clear(); }
  std::size_t size() const { return ops_.size(); }
  const std::vector<TapeOp<T>>& ops() const { return ops_; }

 private:
  std::vector<TapeOp<T>> ops_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse pass over the current tape from a scalar loss. Leaf gradients
// accumulate; the tape is left intact, so calling twice doubles them.
template <class T>
void backward(const BasicTensor<T>& loss);

template <class T>
template <class U>
BasicTensor<U> BasicTensor<T>::cast() const {
  std::vector<U> v(node_->data.begin(), node_->data.end());
  BasicTensor<U> out(node_->shape, std::move(v));
  return out;
}

}  // namespace ibn
