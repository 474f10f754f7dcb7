#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <variant>

#include "ibn/tensor.hpp"

namespace ibn {

// Appearance transforms on images with pixels in [0,1]. Shifts are given in
// 8-bit units and applied as delta/255.
struct RgbShift {
  double delta = 0.0;
};
struct ChannelShift {
  std::size_t channel = 0;
  double delta = 0.0;
};
// x -> mu + factor * (x - mu), mu = mean over all pixels and channels of the image.
struct ContrastScale {
  double factor = 1.0;
};
// Per pixel: clip(gain * (M * rgb) + bias) ^ gamma.
struct StyleProxy {
  std::array<double, 9> matrix{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  std::array<double, 3> gain{1, 1, 1};
  std::array<double, 3> bias{0, 0, 0};
  double gamma = 1.0;

  static StyleProxy monet_like();
};

using TransformSpec = std::variant<RgbShift, ChannelShift, ContrastScale, StyleProxy>;

// Throws std::invalid_argument: factor <= 0, singular matrix, gamma <= 0.
void validate_transform(const TransformSpec& spec);

// Short names: "rgb+50", "r+50" (also g/b), "std*1.5", "monet", "identity".
// General forms "rgb:<d>", "ch:<i>:<d>", "contrast:<f>".
TransformSpec parse_transform(const std::string& s);
std::string transform_name(const TransformSpec& spec);

// In place on one CHW image. Results are clipped to [0,1].
void apply_transform_image(std::span<float> chw, std::size_t channels, std::size_t height, std::size_t width,
                           const TransformSpec& spec);

// Applies to every image of an [N,C,H,W] or [C,H,W] tensor; returns a new tensor.
Tensor apply_transform(const Tensor& images, const TransformSpec& spec);

}  // namespace ibn
