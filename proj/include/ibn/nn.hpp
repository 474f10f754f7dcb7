#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ibn/tensor.hpp"

namespace ibn {

enum class NormKind { BatchNorm, InstanceNorm };
enum class Mode { Train, Eval };

inline constexpr double kNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Parameters and running statistics of one normalizer.
//
// BatchNorm normalizes each channel over (N, H, W): with the batch's own
// statistics in Train mode, with the running averages in Eval mode.
// InstanceNorm normalizes each (sample, channel) slice over (H, W) and behaves
// identically in both modes; its running buffers stay empty.
template <class T>
struct NormState {
  NormKind kind = NormKind::BatchNorm;
  std::size_t num_channels = 0;
  BasicTensor<T> gamma, beta;
  BasicTensor<T> running_mean, running_var;
  T eps = static_cast<T>(kNormEps);
  T momentum = static_cast<T>(kBatchNormMomentum);
  Mode mode = Mode::Train;

  static NormState batch(std::size_t channels);
  static NormState instance(std::size_t channels);

  template <class U>
  NormState<U> cast() const;
};

template <class T>
struct ConvParams {
  BasicTensor<T> weight;                // [out, in, kh, kw]
  std::optional<BasicTensor<T>> bias;   // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }

  template <class U>
  ConvParams<U> cast() const;
};

template <class T>
struct LinearParams {
  BasicTensor<T> weight;  // [out, in]
  BasicTensor<T> bias;    // [out]

  template <class U>
  LinearParams<U> cast() const;
};

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const ConvParams<T>& p);

template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, NormState<T>& s);
template <class T>
BasicTensor<T> instance_norm(const BasicTensor<T>& x, const NormState<T>& s);
// Dispatches on s.kind.
template <class T>
BasicTensor<T> normalize(const BasicTensor<T>& x, NormState<T>& s);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride);
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);  // [N,C,H,W] -> [N,C]
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const LinearParams<T>& p);  // [N,in] -> [N,out]

// Mean over the batch of -log softmax(logits)[label].
template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::uint16_t> labels);

// Channel range [begin, end) of an NCHW tensor, and its inverse.
template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t end);
template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace ibn
