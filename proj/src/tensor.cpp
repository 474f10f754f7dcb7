#include "ibn/tensor.hpp"

#include <sstream>
#include <unordered_map>

namespace ibn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

template <class T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <class T>
void BasicTensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(node_->shape, node_->data);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <class T>
Tape<T>& Tape<T>::current() {
  thread_local Tape<T> tape;
  return tape;
}

template <class T>
void Tape<T>::record(std::string name, std::vector<BasicTensor<T>> inputs, BasicTensor<T>& out,
                     BackwardRule<T> rule) {
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!g_grad_enabled || !any) {
    out.node()->requires_grad = false;
    return;
  }
  TapeOp<T> op;
  op.name = std::move(name);
  op.inputs.reserve(inputs.size());
  for (auto& in : inputs) op.inputs.push_back(in.node());
  op.output = out.node();
  op.output->requires_grad = true;
  op.output->from_tape = true;
  op.backward = std::move(rule);
  ops_.push_back(std::move(op));
}

template <class T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  }
  const auto& ops = Tape<T>::current().ops();
  const TensorNode<T>* root = loss.node().get();
  std::ptrdiff_t start = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(ops.size()) - 1; i >= 0; --i) {
    if (ops[i].output.get() == root) {
      start = i;
      break;
    }
  }
  if (start < 0) throw std::logic_error("backward: loss was not produced through the tape (detached graph)");

  // Gradients of intermediate values live here for the duration of the pass.
  std::unordered_map<const TensorNode<T>*, std::vector<T>> inner;
  inner[root] = std::vector<T>{T(1)};

  std::vector<std::vector<T>*> bufs;
  for (std::ptrdiff_t i = start; i >= 0; --i) {
    const auto& op = ops[i];
    auto it = inner.find(op.output.get());
    if (it == inner.end()) continue;
    std::vector<T> gout = std::move(it->second);
    inner.erase(it);

    bufs.assign(op.inputs.size(), nullptr);
    for (std::size_t k = 0; k < op.inputs.size(); ++k) {
      auto& in = *op.inputs[k];
      if (!in.requires_grad) continue;
      std::vector<T>& g = in.from_tape ? inner[&in] : in.grad;
      if (g.size() != in.data.size()) g.assign(in.data.size(), T(0));
      bufs[k] = &g;
    }
    op.backward(std::span<const T>(gout), std::span<std::vector<T>* const>(bufs));
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const BasicTensor<float>&);
template void backward<double>(const BasicTensor<double>&);

}  // namespace ibn
