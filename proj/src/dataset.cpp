#include "ibn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "ibn/binio.hpp"
#include "ibn/errors.hpp"
#include "ibn/rng.hpp"

namespace ibn {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

constexpr std::size_t S = kImageSize;

// Foreground mask in [0,1] for one image of class k.
void render_mask(std::size_t k, std::size_t num_classes, Rng& rng, double* mask) {
  const std::size_t family = k % 4;
  const std::size_t q = k / 4;
  const std::size_t nq = (num_classes + 3) / 4;
  const double t = (static_cast<double>(q) + 0.5) / static_cast<double>(nq);
  auto at = [&](auto&& f) {
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double u = (x + 0.5) / S, v = (y + 0.5) / S;
        mask[y * S + x] = f(u, v);
      }
  };
  switch (family) {
    case 0: {  // oriented bars
      const double th = kPi * static_cast<double>(q) / static_cast<double>(nq) + rng.normal(0.0, 0.07);
      const double period = 0.24 * rng.uniform(0.9, 1.1);
      const double phase = rng.uniform(0.0, 2 * kPi);
      const double c = std::cos(th), s = std::sin(th);
      at([&](double u, double v) {
        return smoothstep(-0.3, 0.3, std::sin(2 * kPi * (u * c + v * s) / period + phase));
      });
      break;
    }
    case 1: {  // concentric rings
      const double cx = 0.5 + rng.uniform(-0.12, 0.12), cy = 0.5 + rng.uniform(-0.12, 0.12);
      const double period = (0.10 + 0.18 * t) * rng.uniform(0.92, 1.08);
      const double phase = rng.uniform(0.0, 2 * kPi);
      at([&](double u, double v) {
        const double r = std::hypot(u - cx, v - cy);
        return smoothstep(-0.3, 0.3, std::cos(2 * kPi * r / period + phase));
      });
      break;
    }
    case 2: {  // checkers
      const double cell = (0.09 + 0.22 * t) * rng.uniform(0.92, 1.08);
      const double rot = rng.uniform(-0.15, 0.15);
      const double ou = rng.uniform(0.0, 1.0), ov = rng.uniform(0.0, 1.0);
      const double c = std::cos(rot), s = std::sin(rot);
      at([&](double u, double v) {
        const double a = c * u - s * v + ou, b = s * u + c * v + ov;
        return smoothstep(-0.25, 0.25, std::sin(kPi * a / cell) * std::sin(kPi * b / cell));
      });
      break;
    }
    default: {  // blobs: few large ones vs many small ones
      const std::size_t count = 1 + static_cast<std::size_t>(std::lround(7 * t)) + rng.below(2);
      const double radius = 0.26 - 0.17 * t;
      std::vector<std::array<double, 3>> blobs(count);
      for (auto& b : blobs) b = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), radius * rng.uniform(0.85, 1.15)};
      at([&](double u, double v) {
        double m = 0.0;
        for (const auto& b : blobs) {
          const double d2 = (u - b[0]) * (u - b[0]) + (v - b[1]) * (v - b[1]);
          m += std::exp(-d2 / (2 * b[2] * b[2] * 0.35));
        }
        return smoothstep(0.35, 0.65, m);
      });
      break;
    }
  }
}

void render_texture(const DomainStyle& d, Rng& rng, double* tex) {
  switch (d.texture) {
    case Texture::Grain:
      for (std::size_t i = 0; i < S * S; ++i) tex[i] = rng.normal();
      break;
    case Texture::Stripes: {
      const double f = rng.uniform(1.6, 2.4), ph = rng.uniform(0.0, 2 * kPi);
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) tex[y * S + x] = std::sin(f * static_cast<double>(y) + ph);
      break;
    }
    case Texture::Blotches: {
      double w[4][4];
      for (auto& r : w)
        for (auto& v : r) v = rng.uniform(0.0, 2 * kPi);
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double u = x / double(S), v = y / double(S);
          double acc = 0.0;
          for (int i = 0; i < 4; ++i) acc += std::sin(2 * kPi * (1 + i) * (u * std::cos(w[i][0]) + v * std::sin(w[i][0])) + w[i][1]);
          tex[y * S + x] = acc / 2.0;
        }
      break;
    }
  }
}

void render_image(std::size_t label, std::size_t num_classes, const DomainStyle& d, Rng& content, Rng& look,
                  float* out) {
  double mask[S * S], tex[S * S];
  render_mask(label, num_classes, content, mask);
  render_texture(d, look, tex);
  std::array<double, 3> bg = d.background, fg = d.foreground;
  for (std::size_t c = 0; c < 3; ++c) {
    bg[c] += look.uniform(-d.palette_jitter, d.palette_jitter);
    fg[c] += look.uniform(-d.palette_jitter, d.palette_jitter);
  }
  const std::size_t HW = S * S;
  double mean = 0.0;
  std::vector<double> px(3 * HW);
  for (std::size_t i = 0; i < HW; ++i) {
    const double m = mask[i];
    const double tx = d.texture_amp * tex[i] * (1.0 - 0.5 * m);
    for (std::size_t c = 0; c < 3; ++c) {
      double v = bg[c] * (1 - m) + fg[c] * m + tx + d.noise_sd * look.normal();
      px[c * HW + i] = v;
      mean += v;
    }
  }
  mean /= static_cast<double>(3 * HW);
  for (std::size_t i = 0; i < 3 * HW; ++i) out[i] = static_cast<float>(std::clamp(mean + d.contrast * (px[i] - mean), 0.0, 1.0));
  if (d.style) apply_transform_image(std::span<float>(out, 3 * HW), 3, S, S, *d.style);
}

DatasetBundle empty_like(const DatasetBundle& b, std::size_t n) {
  DatasetBundle o;
  const auto& sh = b.images.shape();
  o.images = Tensor({n, sh[1], sh[2], sh[3]});
  o.labels.resize(n);
  o.num_classes = b.num_classes;
  o.domain_tag = b.domain_tag;
  o.content_split = b.content_split;
  return o;
}

}  // namespace

std::vector<std::size_t> DatasetBundle::class_histogram() const {
  std::vector<std::size_t> h(num_classes, 0);
  for (auto l : labels) ++h.at(l);
  return h;
}

DomainStyle domain_preset(const std::string& name) {
  DomainStyle d;
  d.name = name;
  if (name == "domA") {
    // warm palette, high contrast, fine grain
    d.background = {0.30, 0.18, 0.12};
    d.foreground = {0.95, 0.72, 0.42};
    d.palette_jitter = 0.06;
    d.contrast = 1.0;
    d.texture = Texture::Grain;
    d.texture_amp = 0.03;
    d.noise_sd = 0.02;
  } else if (name == "domB") {
    // cool palette, lower contrast, blotchy background, mild color cast
    d.background = {0.22, 0.32, 0.45};
    d.foreground = {0.48, 0.70, 0.80};
    d.palette_jitter = 0.06;
    d.contrast = 0.8;
    d.texture = Texture::Blotches;
    d.texture_amp = 0.05;
    d.noise_sd = 0.02;
    StyleProxy s;
    s.matrix = {0.85, 0.10, 0.05, 0.05, 0.90, 0.05, 0.05, 0.15, 0.80};
    s.gain = {0.95, 1.0, 1.05};
    s.bias = {0.02, 0.0, 0.04};
    s.gamma = 1.2;
    d.style = s;
  } else if (name == "domMonetLike") {
    d = domain_preset("domA");
    d.name = name;
    d.texture = Texture::Stripes;
    d.texture_amp = 0.04;
    d.style = StyleProxy::monet_like();
  } else {
    throw std::invalid_argument("unknown domain preset '" + name + "' (expected domA, domB or domMonetLike)");
  }
  return d;
}

const std::vector<std::string>& domain_preset_names() {
  static const std::vector<std::string> names{"domA", "domB", "domMonetLike"};
  return names;
}

DatasetBundle gen_dataset(std::size_t K, std::size_t per_class, const DomainStyle& domain, std::uint64_t seed) {
  if (K < 2) throw std::invalid_argument("gen_dataset: need at least 2 classes");
  if (K > 65536) throw std::invalid_argument("gen_dataset: labels are 16-bit, too many classes");
  if (per_class < 1) throw std::invalid_argument("gen_dataset: per_class must be >= 1");
  if (domain.style) validate_transform(*domain.style);
  const std::size_t N = K * per_class;
  DatasetBundle b;
  b.num_classes = K;
  b.domain_tag = domain.name;
  b.labels.resize(N);
  for (std::size_t i = 0; i < N; ++i) b.labels[i] = static_cast<std::uint16_t>(i % K);
  Rng order(stream_seed(seed, 0x6c6162656c, 0));
  order.shuffle(std::span<std::uint16_t>(b.labels));

  b.images = Tensor({N, 3, S, S});
  float* px = b.images.data().data();
  const std::uint64_t look_key = name_hash(domain.name);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(N); ++ii) {
    const auto i = static_cast<std::uint64_t>(ii);
    Rng content(stream_seed(seed, 1, i));
    Rng look(stream_seed(seed, look_key, i));
    render_image(b.labels[i], K, domain, content, look, px + i * 3 * S * S);
  }
  return b;
}

std::vector<DatasetBundle> content_split(const DatasetBundle& b, std::size_t parts) {
  if (parts < 1 || b.num_classes % parts != 0) {
    throw std::invalid_argument("content_split: " + std::to_string(parts) + " parts do not divide " +
                                std::to_string(b.num_classes) + " classes");
  }
  const std::size_t per = b.num_classes / parts;
  std::vector<std::vector<std::size_t>> idx(parts);
  for (std::size_t i = 0; i < b.size(); ++i) idx[b.labels[i] / per].push_back(i);
  std::vector<DatasetBundle> out;
  for (std::size_t p = 0; p < parts; ++p) {
    out.push_back(select(b, idx[p]));
    out.back().content_split = static_cast<std::uint32_t>(p);
  }
  return out;
}

DatasetBundle select(const DatasetBundle& b, const std::vector<std::size_t>& indices) {
  DatasetBundle o = empty_like(b, indices.size());
  const std::size_t per = b.images.numel() / std::max<std::size_t>(1, b.size());
  const float* src = b.images.data().data();
  float* dst = o.images.data().data();
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    if (i >= b.size()) throw std::out_of_range("select: index " + std::to_string(i) + " out of range");
    o.labels[j] = b.labels[i];
    std::copy_n(src + i * per, per, dst + j * per);
  }
  return o;
}

DatasetBundle stratified_subset(const DatasetBundle& b, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("stratified_subset: fraction must be in (0,1]");
  std::vector<std::vector<std::size_t>> by_class(b.num_classes);
  for (std::size_t i = 0; i < b.size(); ++i) by_class.at(b.labels[i]).push_back(i);
  std::vector<std::size_t> keep;
  Rng rng(stream_seed(seed, 0x7374726174, 0));
  for (auto& idx : by_class) {
    const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size()) + 1e-9));
    rng.shuffle(std::span<std::size_t>(idx));
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(take, idx.size())));
  }
  std::sort(keep.begin(), keep.end());
  return select(b, keep);
}

DatasetBundle transform_bundle(const DatasetBundle& b, const TransformSpec& spec) {
  DatasetBundle o = b;
  o.images = apply_transform(b.images, spec);
  o.domain_tag = b.domain_tag + "+" + transform_name(spec);
  return o;
}

namespace {

void write_ibnd_stream(const DatasetBundle& b, std::ostream& os) {
  const auto& sh = b.images.shape();
  if (sh.size() != 4 || sh[0] != b.size()) throw SchemaError("IBND: images must be [N,C,H,W] with N labels");
  os.write("IBND", 4);
  binio::put_u32(os, 1);
  for (std::size_t d : sh) binio::put_u32(os, static_cast<std::uint32_t>(d));
  binio::put_u32(os, static_cast<std::uint32_t>(b.num_classes));
  for (auto l : b.labels) binio::put_u16(os, l);
  binio::put_f32s(os, b.images.data().data(), b.images.numel());
}

}  // namespace

std::vector<char> encode_ibnd(const DatasetBundle& b) {
  std::ostringstream os(std::ios::binary);
  write_ibnd_stream(b, os);
  const std::string s = os.str();
  return {s.begin(), s.end()};
}

void write_ibnd(const DatasetBundle& b, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_ibnd_stream(b, os);
  os.flush();
  if (!os) throw IoError("write to '" + path + "' failed");
}

DatasetBundle read_ibnd(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  binio::Reader r(is, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "IBND") throw SchemaError(path + ": not an IBND file");
  if (const auto v = r.u32(); v != 1) throw SchemaError(path + ": unsupported IBND version " + std::to_string(v));
  Shape sh(4);
  for (auto& d : sh) d = r.u32();
  const std::size_t K = r.u32();
  if (K < 1 || K > 65536) throw SchemaError(path + ": bad class count " + std::to_string(K));
  const double total = static_cast<double>(sh[0]) * sh[1] * sh[2] * sh[3];
  if (total > 1e9) throw SchemaError(path + ": implausible size " + shape_str(sh));
  DatasetBundle b;
  b.num_classes = K;
  b.labels.resize(sh[0]);
  for (auto& l : b.labels) {
    l = r.u16();
    if (l >= K) throw SchemaError(path + ": label " + std::to_string(l) + " >= class count " + std::to_string(K));
  }
  b.images = Tensor(sh);
  r.f32s(b.images.data().data(), b.images.numel());
  if (!r.at_end()) throw SchemaError(path + ": trailing bytes after pixel data");
  b.domain_tag = path;
  return b;
}

}  // namespace ibn
