#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ibn/nn.hpp"
#include "ibn/rng.hpp"

namespace ibn {

enum class BlockVariant { Baseline, IBN_a, IBN_b, IBN_c, IBN_d, IBN_a_and_d, IBN_a_x2 };

std::string variant_name(BlockVariant v);
// Accepts "baseline", "ibn-a", "ibn-b", "ibn-c", "ibn-d", "ibn-a&d", "ibn-ax2"
// (underscores and a few spellings are tolerated).
BlockVariant parse_variant(const std::string& s);
const std::vector<BlockVariant>& all_variants();

// Variants that split the first norm of a block (IN on the residual path).
bool splits_residual_norm(BlockVariant v);
// Variants that place IN after the residual addition.
bool has_post_add_in(BlockVariant v);

struct GroupSpec {
  std::size_t blocks = 2;
  std::size_t channels = 16;
  std::size_t stride = 1;
  bool operator==(const GroupSpec&) const = default;
};

// Declarative description of a mini residual network.
//
// in_groups meaning depends on the variant family. For a, c and a×2 it lists
// the 1-based groups whose blocks get the IN/BN norm. For b and d it lists the
// post-addition IN positions: 0 is the stem, g is the last addition of group
// g. a&d applies both readings to the same set.
struct NetworkConfig {
  std::vector<GroupSpec> groups{{2, 16, 1}, {2, 32, 2}, {2, 64, 2}, {2, 128, 2}};
  BlockVariant variant = BlockVariant::Baseline;
  std::set<std::size_t> in_groups;
  double in_ratio = 0.5;
  std::size_t num_classes = 10;
  std::size_t stem_channels = 16;
  std::size_t in_channels = 3;

  // Desk-scale architecture with the variant's conventional IN placement.
  static NetworkConfig desk(BlockVariant v);
  static std::set<std::size_t> default_in_groups(BlockVariant v);

  // Throws std::invalid_argument on an invalid configuration.
  void validate() const;
  // Legal but questionable choices, e.g. post-add IN in the final group.
  std::vector<std::string> warnings() const;

  bool operator==(const NetworkConfig&) const = default;
};

struct ChannelSplit {
  std::size_t n_in;
  std::size_t n_bn;
};

// IN takes the first floor(ratio*C) channels, BN the rest.
ChannelSplit split_channels(std::size_t channels, double ratio);

enum class TensorRole { Weight, Bias, NormAffine, RunningStat };

template <class T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
  TensorRole role;
};

// One normalization slot of a block.
template <class T>
class MixedNorm {
 public:
  enum class Layout {
    Batch,            // BN on all channels
    Instance,         // IN on all channels
    Split,            // IN on the first n_in channels, BN on the rest
    Dual,             // full IN and full BN side by side, first n_in of IN + first C-n_in of BN
    PartialInstance,  // IN on the first n_in channels, identity on the rest
  };

  MixedNorm() = default;
  static MixedNorm batch(std::size_t c);
  static MixedNorm instance(std::size_t c);
  static MixedNorm split(std::size_t c, std::size_t n_in);
  static MixedNorm dual(std::size_t c, std::size_t n_in);
  static MixedNorm partial_instance(std::size_t c, std::size_t n_in);

  BasicTensor<T> forward(const BasicTensor<T>& x);

  Layout layout() const { return layout_; }
  std::size_t channels() const { return channels_; }
  std::size_t instance_channels() const { return n_in_; }
  bool uses_instance_norm() const { return n_in_ > 0; }
  std::size_t param_count() const;
  void set_mode(Mode m);
  void set_eps(T eps);
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const;

  template <class U>
  MixedNorm<U> cast() const;

 private:
  template <class U>
  friend class MixedNorm;

  Layout layout_ = Layout::Batch;
  std::size_t channels_ = 0;
  std::size_t n_in_ = 0;
  std::optional<NormState<T>> in_;
  std::optional<NormState<T>> bn_;
};

// Basic residual block:
//   conv3x3 -> norm1 -> relu -> conv3x3 -> norm2 -> + shortcut -> [post] -> relu
template <class T>
struct Block {
  ConvParams<T> conv1, conv2;
  MixedNorm<T> norm1, norm2;
  std::optional<ConvParams<T>> shortcut_conv;  // 1x1, present when shapes differ
  std::optional<NormState<T>> shortcut_bn;
  std::optional<MixedNorm<T>> post;  // post-addition IN stage

  BasicTensor<T> forward(const BasicTensor<T>& x);
  std::size_t param_count() const;
  void set_mode(Mode m);
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const;

  template <class U>
  Block<U> cast() const;
};

struct BlockOptions {
  bool apply_in = false;     // this block's group is listed for residual-path IN
  bool post_add_in = false;  // this block ends a listed group of the b/d family
};

// Weights are drawn from `rng` in a fixed order (conv1, conv2, shortcut) that
// does not depend on the variant.
template <class T>
Block<T> build_block(BlockVariant variant, std::size_t in_ch, std::size_t out_ch, std::size_t stride, double ratio,
                     BlockOptions opts, Rng& rng);

template <class T>
class Network {
 public:
  NetworkConfig config;
  ConvParams<T> stem_conv;
  MixedNorm<T> stem_norm;
  std::vector<std::vector<Block<T>>> groups;
  LinearParams<T> fc;

  // x is [N, in_channels, H, W] with H, W >= 8. When `probes` is given it
  // receives the post-relu output of the stem and of every block, in order.
  BasicTensor<T> forward(const BasicTensor<T>& x, std::vector<BasicTensor<T>>* probes = nullptr);

  void set_mode(Mode m);
  std::vector<NamedTensor<T>> named_tensors() const;  // parameters and running stats
  std::vector<BasicTensor<T>> parameters() const;      // learnable only
  std::size_t param_count() const;

  std::vector<std::string> probe_names() const;
  std::size_t instance_norm_layers() const;  // norm slots that contain any IN channels

  template <class U>
  Network<U> cast() const;
};

template <class T>
Network<T> build_network(const NetworkConfig& cfg, std::uint64_t seed);

}  // namespace ibn
