#include "ibn/blocks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

#include "ibn/ops.hpp"

namespace ibn {

std::string variant_name(BlockVariant v) {
  switch (v) {
    case BlockVariant::Baseline: return "baseline";
    case BlockVariant::IBN_a: return "ibn-a";
    case BlockVariant::IBN_b: return "ibn-b";
    case BlockVariant::IBN_c: return "ibn-c";
    case BlockVariant::IBN_d: return "ibn-d";
    case BlockVariant::IBN_a_and_d: return "ibn-a&d";
    case BlockVariant::IBN_a_x2: return "ibn-ax2";
  }
  return "?";
}

BlockVariant parse_variant(const std::string& s) {
  std::string k;
  for (char ch : s) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (c == '_' || c == '-' || c == ' ') continue;
    k.push_back(c);
  }
  if (k == "baseline" || k == "resnet") return BlockVariant::Baseline;
  if (k == "ibna" || k == "a") return BlockVariant::IBN_a;
  if (k == "ibnb" || k == "b") return BlockVariant::IBN_b;
  if (k == "ibnc" || k == "c") return BlockVariant::IBN_c;
  if (k == "ibnd" || k == "d") return BlockVariant::IBN_d;
  if (k == "ibna&d" || k == "ibnaandd" || k == "ibnad" || k == "a&d") return BlockVariant::IBN_a_and_d;
  if (k == "ibnax2" || k == "ibna2" || k == "ibnax" || k == "ax2") return BlockVariant::IBN_a_x2;
  throw std::invalid_argument("unknown block variant '" + s + "'");
}

const std::vector<BlockVariant>& all_variants() {
  static const std::vector<BlockVariant> v{BlockVariant::Baseline, BlockVariant::IBN_a,       BlockVariant::IBN_b,
                                           BlockVariant::IBN_c,    BlockVariant::IBN_d,       BlockVariant::IBN_a_and_d,
                                           BlockVariant::IBN_a_x2};
  return v;
}

bool splits_residual_norm(BlockVariant v) {
  return v == BlockVariant::IBN_a || v == BlockVariant::IBN_c || v == BlockVariant::IBN_a_x2 ||
         v == BlockVariant::IBN_a_and_d;
}

bool has_post_add_in(BlockVariant v) {
  return v == BlockVariant::IBN_b || v == BlockVariant::IBN_d || v == BlockVariant::IBN_a_and_d;
}

std::set<std::size_t> NetworkConfig::default_in_groups(BlockVariant v) {
  switch (v) {
    case BlockVariant::Baseline: return {};
    case BlockVariant::IBN_a:
    case BlockVariant::IBN_c:
    case BlockVariant::IBN_a_x2: return {1, 2, 3};
    case BlockVariant::IBN_b:
    case BlockVariant::IBN_d:
    case BlockVariant::IBN_a_and_d: return {0, 1, 2};
  }
  return {};
}

NetworkConfig NetworkConfig::desk(BlockVariant v) {
  NetworkConfig cfg;
  cfg.variant = v;
  cfg.in_groups = default_in_groups(v);
  return cfg;
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("network config: " + m); };
  if (groups.empty()) fail("at least one residual group is required");
  for (const auto& g : groups) {
    if (g.blocks == 0 || g.channels == 0 || g.stride == 0) fail("group blocks, channels and stride must be positive");
  }
  if (stem_channels == 0 || in_channels == 0) fail("stem and input channels must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (!(in_ratio >= 0.0 && in_ratio <= 1.0)) fail("in_ratio must lie in [0, 1]");
  for (auto g : in_groups) {
    if (g > groups.size()) fail("in_groups references group " + std::to_string(g) + " of " + std::to_string(groups.size()));
    if (g == 0 && !has_post_add_in(variant)) fail("in_groups may list the stem (0) only for b/d variants");
  }
}

std::vector<std::string> NetworkConfig::warnings() const {
  std::vector<std::string> w;
  if (has_post_add_in(variant) && in_groups.contains(groups.size())) {
    w.push_back("post-addition IN placed in the final residual group (" + std::to_string(groups.size()) +
                "); IN there is expected to hurt discrimination");
  }
  if (variant == BlockVariant::Baseline && !in_groups.empty()) w.push_back("in_groups is ignored for the baseline");
  return w;
}

ChannelSplit split_channels(std::size_t channels, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("split_channels: ratio must lie in [0, 1]");
  const auto n_in = std::min(channels, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(channels))));
  return {n_in, channels - n_in};
}

// ---------------------------------------------------------------------------
// MixedNorm

template <class T>
MixedNorm<T> MixedNorm<T>::batch(std::size_t c) {
  MixedNorm m;
  m.layout_ = Layout::Batch;
  m.channels_ = c;
  m.bn_ = NormState<T>::batch(c);
  return m;
}

template <class T>
MixedNorm<T> MixedNorm<T>::instance(std::size_t c) {
  MixedNorm m;
  m.layout_ = Layout::Instance;
  m.channels_ = c;
  m.n_in_ = c;
  m.in_ = NormState<T>::instance(c);
  return m;
}

template <class T>
MixedNorm<T> MixedNorm<T>::split(std::size_t c, std::size_t n_in) {
  if (n_in == 0) return batch(c);
  if (n_in >= c) return instance(c);
  MixedNorm m;
  m.layout_ = Layout::Split;
  m.channels_ = c;
  m.n_in_ = n_in;
  m.in_ = NormState<T>::instance(n_in);
  m.bn_ = NormState<T>::batch(c - n_in);
  return m;
}

template <class T>
MixedNorm<T> MixedNorm<T>::dual(std::size_t c, std::size_t n_in) {
  MixedNorm m;
  m.layout_ = Layout::Dual;
  m.channels_ = c;
  m.n_in_ = std::min(n_in, c);
  m.in_ = NormState<T>::instance(c);
  m.bn_ = NormState<T>::batch(c);
  return m;
}

template <class T>
MixedNorm<T> MixedNorm<T>::partial_instance(std::size_t c, std::size_t n_in) {
  MixedNorm m;
  m.layout_ = Layout::PartialInstance;
  m.channels_ = c;
  m.n_in_ = std::min(n_in, c);
  if (m.n_in_ > 0) m.in_ = NormState<T>::instance(m.n_in_);
  return m;
}

template <class T>
BasicTensor<T> MixedNorm<T>::forward(const BasicTensor<T>& x) {
  const std::size_t c = channels_;
  switch (layout_) {
    case Layout::Batch: return batch_norm(x, *bn_);
    case Layout::Instance: return instance_norm(x, *in_);
    case Layout::Split:
      return concat_channels(instance_norm(slice_channels(x, 0, n_in_), *in_),
                             batch_norm(slice_channels(x, n_in_, c), *bn_));
    case Layout::Dual: {
      if (n_in_ == 0) return batch_norm(x, *bn_);
      BasicTensor<T> i = instance_norm(x, *in_);
      if (n_in_ == c) return i;
      BasicTensor<T> b = batch_norm(x, *bn_);
      return concat_channels(slice_channels(i, 0, n_in_), slice_channels(b, 0, c - n_in_));
    }
    case Layout::PartialInstance:
      if (n_in_ == 0) return x;
      if (n_in_ == c) return instance_norm(x, *in_);
      return concat_channels(instance_norm(slice_channels(x, 0, n_in_), *in_), slice_channels(x, n_in_, c));
  }
  return x;
}

template <class T>
std::size_t MixedNorm<T>::param_count() const {
  std::size_t n = 0;
  if (in_) n += 2 * in_->num_channels;
  if (bn_) n += 2 * bn_->num_channels;
  return n;
}

template <class T>
void MixedNorm<T>::set_mode(Mode m) {
  if (in_) in_->mode = m;
  if (bn_) bn_->mode = m;
}

template <class T>
void MixedNorm<T>::set_eps(T eps) {
  if (in_) in_->eps = eps;
  if (bn_) bn_->eps = eps;
}

namespace {

template <class T>
void collect_norm(const std::string& prefix, const NormState<T>& s, std::vector<NamedTensor<T>>& out) {
  out.push_back({prefix + ".gamma", s.gamma, TensorRole::NormAffine});
  out.push_back({prefix + ".beta", s.beta, TensorRole::NormAffine});
  if (s.kind == NormKind::BatchNorm) {
    out.push_back({prefix + ".running_mean", s.running_mean, TensorRole::RunningStat});
    out.push_back({prefix + ".running_var", s.running_var, TensorRole::RunningStat});
  }
}

template <class T>
void collect_conv(const std::string& prefix, const ConvParams<T>& p, std::vector<NamedTensor<T>>& out) {
  out.push_back({prefix + ".weight", p.weight, TensorRole::Weight});
  if (p.bias) out.push_back({prefix + ".bias", *p.bias, TensorRole::Bias});
}

template <class T>
ConvParams<T> he_conv(std::size_t out_ch, std::size_t in_ch, std::size_t k, std::size_t stride, std::size_t pad,
                      Rng& rng) {
  ConvParams<T> p;
  p.weight = BasicTensor<T>({out_ch, in_ch, k, k});
  const double sd = std::sqrt(2.0 / static_cast<double>(in_ch * k * k));
  for (auto& w : p.weight.data()) w = static_cast<T>(rng.normal(0.0, sd));
  p.weight.set_requires_grad();
  p.stride = stride;
  p.padding = pad;
  return p;
}

}  // namespace

template <class T>
void MixedNorm<T>::collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
  if (in_) collect_norm(prefix + ".in", *in_, out);
  if (bn_) collect_norm(prefix + ".bn", *bn_, out);
}

template <class T>
template <class U>
MixedNorm<U> MixedNorm<T>::cast() const {
  MixedNorm<U> m;
  m.layout_ = static_cast<typename MixedNorm<U>::Layout>(layout_);
  m.channels_ = channels_;
  m.n_in_ = n_in_;
  if (in_) m.in_ = in_->template cast<U>();
  if (bn_) m.bn_ = bn_->template cast<U>();
  return m;
}

// ---------------------------------------------------------------------------
// Block

template <class T>
BasicTensor<T> Block<T>::forward(const BasicTensor<T>& x) {
  BasicTensor<T> h = relu(norm1.forward(conv2d(x, conv1)));
  h = norm2.forward(conv2d(h, conv2));
  BasicTensor<T> s = x;
  if (shortcut_conv) s = batch_norm(conv2d(x, *shortcut_conv), *shortcut_bn);
  BasicTensor<T> y = add(h, s);
  if (post) y = post->forward(y);
  return relu(y);
}

template <class T>
std::size_t Block<T>::param_count() const {
  std::size_t n = conv1.weight.numel() + conv2.weight.numel() + norm1.param_count() + norm2.param_count();
  if (shortcut_conv) n += shortcut_conv->weight.numel() + 2 * shortcut_bn->num_channels;
  if (post) n += post->param_count();
  return n;
}

template <class T>
void Block<T>::set_mode(Mode m) {
  norm1.set_mode(m);
  norm2.set_mode(m);
  if (shortcut_bn) shortcut_bn->mode = m;
  if (post) post->set_mode(m);
}

template <class T>
void Block<T>::collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
  collect_conv(prefix + ".conv1", conv1, out);
  norm1.collect(prefix + ".norm1", out);
  collect_conv(prefix + ".conv2", conv2, out);
  norm2.collect(prefix + ".norm2", out);
  if (shortcut_conv) {
    collect_conv(prefix + ".shortcut.conv", *shortcut_conv, out);
    collect_norm(prefix + ".shortcut.bn", *shortcut_bn, out);
  }
  if (post) post->collect(prefix + ".post", out);
}

template <class T>
template <class U>
Block<U> Block<T>::cast() const {
  Block<U> b;
  b.conv1 = conv1.template cast<U>();
  b.conv2 = conv2.template cast<U>();
  b.norm1 = norm1.template cast<U>();
  b.norm2 = norm2.template cast<U>();
  if (shortcut_conv) b.shortcut_conv = shortcut_conv->template cast<U>();
  if (shortcut_bn) b.shortcut_bn = shortcut_bn->template cast<U>();
  if (post) b.post = post->template cast<U>();
  return b;
}

template <class T>
Block<T> build_block(BlockVariant variant, std::size_t in_ch, std::size_t out_ch, std::size_t stride, double ratio,
                     BlockOptions opts, Rng& rng) {
  if (in_ch == 0 || out_ch == 0 || stride == 0) throw std::invalid_argument("build_block: sizes must be positive");
  const ChannelSplit sp = split_channels(out_ch, ratio);

  Block<T> b;
  b.conv1 = he_conv<T>(out_ch, in_ch, 3, stride, 1, rng);
  b.conv2 = he_conv<T>(out_ch, out_ch, 3, 1, 1, rng);
  if (in_ch != out_ch || stride != 1) {
    b.shortcut_conv = he_conv<T>(out_ch, in_ch, 1, stride, 0, rng);
    b.shortcut_bn = NormState<T>::batch(out_ch);
  }

  b.norm1 = MixedNorm<T>::batch(out_ch);
  b.norm2 = MixedNorm<T>::batch(out_ch);
  switch (variant) {
    case BlockVariant::Baseline: break;
    case BlockVariant::IBN_a:
    case BlockVariant::IBN_a_and_d:
      if (opts.apply_in) b.norm1 = MixedNorm<T>::split(out_ch, sp.n_in);
      break;
    case BlockVariant::IBN_a_x2:
      if (opts.apply_in) {
        b.norm1 = MixedNorm<T>::split(out_ch, sp.n_in);
        b.norm2 = MixedNorm<T>::split(out_ch, sp.n_in);
      }
      break;
    case BlockVariant::IBN_c:
      if (opts.apply_in) b.norm1 = MixedNorm<T>::dual(out_ch, sp.n_in);
      break;
    case BlockVariant::IBN_b:
    case BlockVariant::IBN_d: break;
  }

  if (opts.post_add_in) {
    if (variant == BlockVariant::IBN_b) {
      b.post = MixedNorm<T>::instance(out_ch);
    } else if ((variant == BlockVariant::IBN_d || variant == BlockVariant::IBN_a_and_d) && sp.n_in > 0) {
      b.post = MixedNorm<T>::partial_instance(out_ch, sp.n_in);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Network

template <class T>
BasicTensor<T> Network<T>::forward(const BasicTensor<T>& x, std::vector<BasicTensor<T>>* probes) {
  if (x.rank() != 4 || x.dim(1) != config.in_channels) {
    throw ShapeError("network: expected input [N," + std::to_string(config.in_channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  if (x.dim(2) < 8 || x.dim(3) < 8) throw ShapeError("network: spatial size must be at least 8x8");
  BasicTensor<T> h = relu(stem_norm.forward(conv2d(x, stem_conv)));
  if (probes) probes->push_back(h);
  for (auto& g : groups)
    for (auto& b : g) {
      h = b.forward(h);
      if (probes) probes->push_back(h);
    }
  return linear(global_avg_pool(h), fc);
}

template <class T>
void Network<T>::set_mode(Mode m) {
  stem_norm.set_mode(m);
  for (auto& g : groups)
    for (auto& b : g) b.set_mode(m);
}

template <class T>
std::vector<NamedTensor<T>> Network<T>::named_tensors() const {
  std::vector<NamedTensor<T>> out;
  collect_conv("stem.conv", stem_conv, out);
  stem_norm.collect("stem.norm", out);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t b = 0; b < groups[g].size(); ++b)
      groups[g][b].collect("group" + std::to_string(g + 1) + ".block" + std::to_string(b), out);
  out.push_back({"fc.weight", fc.weight, TensorRole::Weight});
  out.push_back({"fc.bias", fc.bias, TensorRole::Bias});
  return out;
}

template <class T>
std::vector<BasicTensor<T>> Network<T>::parameters() const {
  std::vector<BasicTensor<T>> out;
  for (auto& nt : named_tensors())
    if (nt.role != TensorRole::RunningStat) out.push_back(nt.tensor);
  return out;
}

template <class T>
std::size_t Network<T>::param_count() const {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.numel();
  return n;
}

template <class T>
std::vector<std::string> Network<T>::probe_names() const {
  std::vector<std::string> names{"stem"};
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t b = 0; b < groups[g].size(); ++b)
      names.push_back("group" + std::to_string(g + 1) + ".block" + std::to_string(b));
  return names;
}

template <class T>
std::size_t Network<T>::instance_norm_layers() const {
  std::size_t n = stem_norm.uses_instance_norm() ? 1 : 0;
  for (const auto& g : groups)
    for (const auto& b : g) {
      n += b.norm1.uses_instance_norm() ? 1 : 0;
      n += b.norm2.uses_instance_norm() ? 1 : 0;
      n += (b.post && b.post->uses_instance_norm()) ? 1 : 0;
    }
  return n;
}

template <class T>
template <class U>
Network<U> Network<T>::cast() const {
  Network<U> n;
  n.config = config;
  n.stem_conv = stem_conv.template cast<U>();
  n.stem_norm = stem_norm.template cast<U>();
  for (const auto& g : groups) {
    n.groups.emplace_back();
    for (const auto& b : g) n.groups.back().push_back(b.template cast<U>());
  }
  n.fc = fc.template cast<U>();
  return n;
}

template <class T>
Network<T> build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Network<T> net;
  net.config = cfg;
  const ChannelSplit stem_split = split_channels(cfg.stem_channels, cfg.in_ratio);

  // Bias-free and unpadded: a per-image affine change of the input then maps
  // to a per-channel affine change of the stem output.
  net.stem_conv = he_conv<T>(cfg.stem_channels, cfg.in_channels, 3, 1, 0, rng);
  net.stem_norm = MixedNorm<T>::batch(cfg.stem_channels);
  if (cfg.in_groups.contains(0)) {
    if (cfg.variant == BlockVariant::IBN_b) {
      net.stem_norm = MixedNorm<T>::instance(cfg.stem_channels);
    } else if (cfg.variant == BlockVariant::IBN_d || cfg.variant == BlockVariant::IBN_a_and_d) {
      net.stem_norm = MixedNorm<T>::split(cfg.stem_channels, stem_split.n_in);
    }
  }

  std::size_t ch = cfg.stem_channels;
  for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
    const GroupSpec& gs = cfg.groups[g];
    const bool listed = cfg.in_groups.contains(g + 1);
    net.groups.emplace_back();
    for (std::size_t b = 0; b < gs.blocks; ++b) {
      BlockOptions opts;
      opts.apply_in = listed && splits_residual_norm(cfg.variant);
      opts.post_add_in = listed && has_post_add_in(cfg.variant) && b + 1 == gs.blocks;
      net.groups.back().push_back(
          build_block<T>(cfg.variant, ch, gs.channels, b == 0 ? gs.stride : 1, cfg.in_ratio, opts, rng));
      ch = gs.channels;
    }
  }

  net.fc.weight = BasicTensor<T>({cfg.num_classes, ch});
  const double sd = std::sqrt(2.0 / static_cast<double>(ch));
  for (auto& w : net.fc.weight.data()) w = static_cast<T>(rng.normal(0.0, sd));
  net.fc.weight.set_requires_grad();
  net.fc.bias = BasicTensor<T>::zeros({cfg.num_classes});
  net.fc.bias.set_requires_grad();
  return net;
}

#define IBN_INSTANTIATE(T)                                                                                  \
  template class MixedNorm<T>;                                                                              \
  template struct Block<T>;                                                                                 \
  template class Network<T>;                                                                                \
  template Block<T> build_block<T>(BlockVariant, std::size_t, std::size_t, std::size_t, double, BlockOptions, \
                                   Rng&);                                                                   \
  template Network<T> build_network<T>(const NetworkConfig&, std::uint64_t);

IBN_INSTANTIATE(float)
IBN_INSTANTIATE(double)
#undef IBN_INSTANTIATE

template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template Block<double> Block<float>::cast<double>() const;
template Block<float> Block<double>::cast<float>() const;
template Network<float> Network<float>::cast<float>() const;
template Block<float> Block<float>::cast<float>() const;

}  // namespace ibn
