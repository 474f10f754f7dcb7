#include "ibn/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace ibn {

namespace {

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

double det3(const std::array<double, 9>& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6]);
}

double parse_number(const std::string& s, const std::string& whole) {
  std::size_t used = 0;
  double v;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("transform '" + whole + "': bad number '" + s + "'");
  }
  if (used != s.size()) throw std::invalid_argument("transform '" + whole + "': bad number '" + s + "'");
  return v;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Shape checks hoisted out of the per-image loop (which may run in parallel).
void check_applicable(const TransformSpec& spec, std::size_t C) {
  validate_transform(spec);
  if (const auto* c = std::get_if<ChannelShift>(&spec); c && c->channel >= C) {
    throw std::invalid_argument("ChannelShift channel " + std::to_string(c->channel) + " out of range for " +
                                std::to_string(C) + " channels");
  }
  if (std::holds_alternative<StyleProxy>(spec) && C != 3)
    throw std::invalid_argument("StyleProxy needs 3 channels, got " + std::to_string(C));
}

}  // namespace

StyleProxy StyleProxy::monet_like() {
  StyleProxy s;
  s.matrix = {0.62, 0.28, 0.10, 0.18, 0.64, 0.22, 0.12, 0.30, 0.55};
  s.gain = {1.12, 1.02, 0.92};
  s.bias = {0.06, 0.04, 0.10};
  s.gamma = 0.75;
  return s;
}

void validate_transform(const TransformSpec& spec) {
  if (const auto* c = std::get_if<ContrastScale>(&spec)) {
    if (!(c->factor > 0.0) || !std::isfinite(c->factor))
      throw std::invalid_argument("ContrastScale factor must be > 0, got " + fmt(c->factor));
  } else if (const auto* s = std::get_if<StyleProxy>(&spec)) {
    if (std::abs(det3(s->matrix)) < 1e-12) throw std::invalid_argument("StyleProxy color matrix is singular");
    if (!(s->gamma > 0.0) || !std::isfinite(s->gamma))
      throw std::invalid_argument("StyleProxy gamma must be > 0, got " + fmt(s->gamma));
  }
}

TransformSpec parse_transform(const std::string& s) {
  if (s == "identity" || s == "none") return RgbShift{0.0};
  if (s == "monet") return StyleProxy::monet_like();
  TransformSpec out;
  if (s.rfind("rgb:", 0) == 0) {
    out = RgbShift{parse_number(s.substr(4), s)};
  } else if (s.rfind("rgb", 0) == 0 && s.size() > 3 && (s[3] == '+' || s[3] == '-')) {
    out = RgbShift{parse_number(s.substr(3), s)};
  } else if (s.rfind("ch:", 0) == 0) {
    const auto colon = s.find(':', 3);
    if (colon == std::string::npos) throw std::invalid_argument("transform '" + s + "': expected ch:<index>:<delta>");
    const double idx = parse_number(s.substr(3, colon - 3), s);
    if (idx < 0 || idx != std::floor(idx)) throw std::invalid_argument("transform '" + s + "': bad channel index");
    out = ChannelShift{static_cast<std::size_t>(idx), parse_number(s.substr(colon + 1), s)};
  } else if (s.size() > 1 && (s[0] == 'r' || s[0] == 'g' || s[0] == 'b') && (s[1] == '+' || s[1] == '-')) {
    const std::size_t ch = s[0] == 'r' ? 0 : s[0] == 'g' ? 1 : 2;
    out = ChannelShift{ch, parse_number(s.substr(1), s)};
  } else if (s.rfind("std*", 0) == 0) {
    out = ContrastScale{parse_number(s.substr(4), s)};
  } else if (s.rfind("contrast:", 0) == 0) {
    out = ContrastScale{parse_number(s.substr(9), s)};
  } else {
    throw std::invalid_argument("unknown transform '" + s + "'");
  }
  validate_transform(out);
  return out;
}

std::string transform_name(const TransformSpec& spec) {
  auto signed_num = [](double v) { return (v >= 0 ? "+" : "") + fmt(v); };
  if (const auto* r = std::get_if<RgbShift>(&spec)) return "rgb" + signed_num(r->delta);
  if (const auto* c = std::get_if<ChannelShift>(&spec)) return "ch:" + std::to_string(c->channel) + ":" + fmt(c->delta);
  if (const auto* k = std::get_if<ContrastScale>(&spec)) return "std*" + fmt(k->factor);
  return "style";
}

void apply_transform_image(std::span<float> img, std::size_t C, std::size_t H, std::size_t W,
                           const TransformSpec& spec) {
  const std::size_t HW = H * W;
  if (img.size() != C * HW) throw ShapeError("apply_transform: image buffer does not match C*H*W");
  check_applicable(spec, C);

  if (const auto* r = std::get_if<RgbShift>(&spec)) {
    const double d = r->delta / 255.0;
    for (auto& v : img) v = static_cast<float>(clip01(v + d));
  } else if (const auto* c = std::get_if<ChannelShift>(&spec)) {
    const double d = c->delta / 255.0;
    for (auto& v : img.subspan(c->channel * HW, HW)) v = static_cast<float>(clip01(v + d));
  } else if (const auto* k = std::get_if<ContrastScale>(&spec)) {
    double mu = 0.0;
    for (float v : img) mu += v;
    mu /= static_cast<double>(img.size());
    for (auto& v : img) v = static_cast<float>(clip01(mu + k->factor * (v - mu)));
  } else {
    const auto& s = std::get<StyleProxy>(spec);
    const auto& m = s.matrix;
    for (std::size_t i = 0; i < HW; ++i) {
      const double x[3] = {img[i], img[HW + i], img[2 * HW + i]};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double lin = m[ch * 3] * x[0] + m[ch * 3 + 1] * x[1] + m[ch * 3 + 2] * x[2];
        const double y = clip01(s.gain[ch] * lin + s.bias[ch]);
        img[ch * HW + i] = static_cast<float>(clip01(s.gamma == 1.0 ? y : std::pow(y, s.gamma)));
      }
    }
  }
}

Tensor apply_transform(const Tensor& images, const TransformSpec& spec) {
  const auto& sh = images.shape();
  if (sh.size() != 3 && sh.size() != 4) throw ShapeError("apply_transform: expected [N,C,H,W] or [C,H,W]");
  const std::size_t off = sh.size() - 3;
  const std::size_t N = sh.size() == 4 ? sh[0] : 1;
  const std::size_t C = sh[off], H = sh[off + 1], W = sh[off + 2];
  Tensor out = images.clone();
  auto d = out.data();
  const std::size_t per = C * H * W;
  check_applicable(spec, C);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n)
    apply_transform_image(d.subspan(static_cast<std::size_t>(n) * per, per), C, H, W, spec);
  return out;
}

}  // namespace ibn
