#include <gtest/gtest.h>

#include "ibn/gradcheck.hpp"
#include "gradcheck_suite.hpp"
#include "test_util.hpp"

using namespace ibn;
using testutil::randn;

TEST(Split, Examples) {
  EXPECT_EQ(split_channels(64, 0.5).n_in, 32u);
  EXPECT_EQ(split_channels(64, 0.5).n_bn, 32u);
  EXPECT_EQ(split_channels(7, 0.5).n_in, 3u);
  EXPECT_EQ(split_channels(7, 0.5).n_bn, 4u);
  EXPECT_EQ(split_channels(9, 0).n_in, 0u);
  EXPECT_EQ(split_channels(9, 0).n_bn, 9u);
  EXPECT_EQ(split_channels(9, 1).n_in, 9u);
  EXPECT_THROW(split_channels(4, 1.5), std::invalid_argument);
}

TEST(Variants, NamesRoundTrip) {
  for (auto v : all_variants()) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_EQ(parse_variant("IBN_a"), BlockVariant::IBN_a);
  EXPECT_THROW(parse_variant("ibn-z"), std::invalid_argument);
}

TEST(Config, Validation) {
  auto c = NetworkConfig::desk(BlockVariant::IBN_a);
  EXPECT_NO_THROW(c.validate());
  c.in_groups = {5};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.in_groups = {0};  // the stem is a b/d position
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = NetworkConfig::desk(BlockVariant::IBN_b);
  EXPECT_EQ(c.in_groups, (std::set<std::size_t>{0, 1, 2}));
  EXPECT_TRUE(c.warnings().empty());
  c.in_groups.insert(4);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.warnings().size(), 1u);
  c.in_ratio = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Block, BaselineParamCountFormula) {
  Rng rng(1);
  for (auto [in, out, stride] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{
           {16, 16, 1}, {16, 32, 2}, {5, 7, 1}, {8, 8, 2}}) {
    auto b = build_block<float>(BlockVariant::Baseline, in, out, stride, 0.5, {}, rng);
    std::size_t expect = 9 * in * out + 9 * out * out + 4 * out;
    if (in != out || stride != 1) expect += in * out + 2 * out;
    EXPECT_EQ(b.param_count(), expect);
  }
}

TEST(Block, IbnAKeepsParameterCount) {
  Rng rng(2);
  for (std::size_t in : {3u, 8u, 16u})
    for (std::size_t out : {4u, 7u, 16u})
      for (std::size_t stride : {1u, 2u})
        for (double rho : {0.25, 0.5, 1.0}) {
          auto base = build_block<float>(BlockVariant::Baseline, in, out, stride, rho, {true, false}, rng);
          auto a = build_block<float>(BlockVariant::IBN_a, in, out, stride, rho, {true, false}, rng);
          auto c = build_block<float>(BlockVariant::IBN_c, in, out, stride, rho, {true, false}, rng);
          EXPECT_EQ(a.param_count(), base.param_count());
          EXPECT_GT(c.param_count(), base.param_count());
        }
}

TEST(Block, IbnANeverNormalizesIdentityPath) {
  auto net = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_a), 3);
  for (const auto& g : net.groups)
    for (const auto& b : g) {
      EXPECT_FALSE(b.post.has_value());
      if (b.shortcut_bn) EXPECT_EQ(b.shortcut_bn->kind, NormKind::BatchNorm);
      EXPECT_FALSE(b.norm2.uses_instance_norm());
    }
  EXPECT_FALSE(net.stem_norm.uses_instance_norm());
}

TEST(Network, DefaultShapesAndCounts) {
  Rng rng(4);
  auto x = testutil::randu<float>({3, 3, 32, 32}, rng, 0, 1);
  auto base = build_network<float>(NetworkConfig::desk(BlockVariant::Baseline), 1);
  std::vector<Tensor> probes;
  EXPECT_EQ(base.forward(x, &probes).shape(), (Shape{3, 10}));
  EXPECT_EQ(probes.size(), 9u);
  EXPECT_EQ(base.probe_names().size(), 9u);
  EXPECT_EQ(base.probe_names()[3], "group2.block0");
  EXPECT_EQ(probes[0].shape(), (Shape{3, 16, 30, 30}));
  EXPECT_EQ(probes[8].shape(), (Shape{3, 128, 4, 4}));
  EXPECT_EQ(base.instance_norm_layers(), 0u);

  auto a = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_a), 1);
  EXPECT_EQ(a.instance_norm_layers(), 6u);
  EXPECT_EQ(a.param_count(), base.param_count());
  auto b = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_b), 1);
  EXPECT_EQ(b.instance_norm_layers(), 3u);
  EXPECT_EQ(b.stem_norm.layout(), MixedNorm<float>::Layout::Instance);

  EXPECT_THROW(base.forward(Tensor({1, 1, 32, 32})), ShapeError);
  EXPECT_THROW(base.forward(Tensor({1, 3, 7, 7})), ShapeError);
}

TEST(Network, CheckpointNamesAreDotted) {
  auto net = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_a), 1);
  std::set<std::string> names;
  for (const auto& nt : net.named_tensors()) EXPECT_TRUE(names.insert(nt.name).second) << nt.name;
  EXPECT_TRUE(names.contains("stem.conv.weight"));
  EXPECT_TRUE(names.contains("group1.block0.conv1.weight"));
  EXPECT_TRUE(names.contains("group1.block0.norm1.in.gamma"));
  EXPECT_TRUE(names.contains("group2.block0.shortcut.bn.running_var"));
  EXPECT_TRUE(names.contains("fc.bias"));
}

TEST(Network, ZeroInputGivesEqualLogits) {
  for (auto v : all_variants()) {
    auto net = build_network<float>(NetworkConfig::desk(v), 2);
    auto y = net.forward(Tensor({2, 3, 16, 16}));
    for (std::size_t i = 1; i < y.numel(); ++i) EXPECT_EQ(y[i], y[0]) << variant_name(v);
  }
}

TEST(Network, ParameterCountRelations) {
  Rng rng(5);
  std::vector<NetworkConfig> cfgs{NetworkConfig::desk(BlockVariant::Baseline)};
  for (int k = 0; k < 5; ++k) {
    NetworkConfig c;
    c.groups.clear();
    const std::size_t ng = 1 + rng.below(4);
    for (std::size_t g = 0; g < ng; ++g) c.groups.push_back({1 + rng.below(3), 4 + rng.below(29), 1 + rng.below(2)});
    c.stem_channels = 4 + rng.below(13);
    c.num_classes = 2 + rng.below(9);
    c.in_ratio = rng.uniform(0.1, 1.0);
    for (std::size_t g = 1; g <= ng; ++g)
      if (rng.below(2)) c.in_groups.insert(g);
    if (c.in_groups.empty()) c.in_groups.insert(1);
    cfgs.push_back(c);
  }
  for (auto c : cfgs) {
    c.variant = BlockVariant::Baseline;
    const auto base = build_network<float>(c, 1).param_count();
    c.variant = BlockVariant::IBN_a;
    if (c.in_groups.empty()) c.in_groups = {1, 2, 3};
    EXPECT_EQ(build_network<float>(c, 1).param_count(), base);
    c.variant = BlockVariant::IBN_c;
    EXPECT_GT(build_network<float>(c, 1).param_count(), base);
  }
}

TEST(Network, RhoZeroDegeneratesToBaseline) {
  Rng rng(6);
  auto x = testutil::randu<float>({4, 3, 16, 16}, rng, 0, 1);
  auto base_cfg = NetworkConfig::desk(BlockVariant::Baseline);
  auto base = build_network<float>(base_cfg, 9);
  const auto ref = testutil::to_vec(base.forward(x));
  for (auto v : all_variants()) {
    for (bool keep_groups : {false, true}) {
      auto c = NetworkConfig::desk(v);
      c.in_ratio = 0;
      if (!keep_groups) c.in_groups.clear();
      // IN_b ignores rho; it degenerates only without IN positions.
      if (keep_groups && v == BlockVariant::IBN_b) continue;
      auto net = build_network<float>(c, 9);
      EXPECT_EQ(testutil::to_vec(net.forward(x)), ref) << variant_name(v) << " groups=" << keep_groups;
      if (v != BlockVariant::IBN_c || !keep_groups) EXPECT_EQ(net.param_count(), base.param_count());
    }
  }
}

TEST(Network, IbnBIgnoresPerImageAffine) {
  Rng rng(7);
  auto x = testutil::randu<float>({20, 3, 32, 32}, rng, 0, 1);
  auto t = x.clone();
  for (std::size_t n = 0; n < 20; ++n) {
    const float a = static_cast<float>(rng.uniform(0.5, 2)), b = static_cast<float>(rng.uniform(-0.2, 0.2));
    for (std::size_t i = 0; i < 3 * 32 * 32; ++i) {
      float& v = t.data()[n * 3 * 32 * 32 + i];
      v = a * v + b;
    }
  }
  auto net = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_b), 3);
  net.set_mode(Mode::Eval);
  EXPECT_LT(testutil::max_abs_diff(net.forward(x), net.forward(t)), 1e-4);
}

TEST(Network, BatchOfOneIsFinite) {
  Rng rng(8);
  auto x = testutil::randu<float>({1, 3, 32, 32}, rng, 0, 1);
  for (auto v : {BlockVariant::Baseline, BlockVariant::IBN_a}) {
    auto net = build_network<float>(NetworkConfig::desk(v), 1);
    const auto y = net.forward(x);
    for (float val : y.data()) EXPECT_TRUE(std::isfinite(val));
  }
}

TEST(Network, CastRoundTripIsExact) {
  auto net = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_a_and_d), 4);
  auto back = net.cast<double>().cast<float>();
  const auto a = net.named_tensors(), b = back.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(testutil::to_vec(a[i].tensor), testutil::to_vec(b[i].tensor));
  }
}


TEST(BlockGradients, AllVariants) {
  for (auto v : all_variants())
    for (std::size_t stride : {1u, 2u})
      for (std::uint64_t seed = 0; seed < 3; ++seed)
        EXPECT_LT(testutil::block_gradcheck(v, stride, seed, 1e-4), 1e-3) << variant_name(v) << " stride " << stride;
}

TEST(NetworkGradients, TwoBlockModel) {
  for (auto v : {BlockVariant::Baseline, BlockVariant::IBN_a, BlockVariant::IBN_b}) {
    for (std::uint64_t sub = 0;; ++sub) {
      Rng rng(40 + sub);
      NetworkConfig c = NetworkConfig::desk(v);
      c.groups = {{1, 4, 1}, {1, 8, 2}};
      c.stem_channels = 4;
      c.num_classes = 3;
      c.in_groups = v == BlockVariant::IBN_b ? std::set<std::size_t>{0, 1} : std::set<std::size_t>{1};
      auto net = build_network<double>(c, sub);
      auto x = randn<double>({2, 3, 8, 8}, rng);
      const std::vector<std::uint16_t> labels{0, 2};
      auto leaves = net.parameters();
      leaves.push_back(x);
      if (!testutil::kink_free<double>([&] { return testutil::network_relu_inputs(net, x); }, leaves, 1e-4)) continue;
      std::function<TensorD()> f = [&] { return softmax_cross_entropy(net.forward(x), labels); };
      EXPECT_LT(finite_difference_check<double>(f, leaves, 1e-4), 1e-3) << variant_name(v);
      break;
    }
  }
}

// The 32-bit tape must produce the same gradients as the 64-bit one up to
// float rounding, on inputs where both precisions take the same relu branches
// (a single flipped unit in a deep 2x2 map shifts every upstream gradient by
// a few percent).
TEST(NetworkGradients, FloatAgreesWithDouble) {
  for (auto v : all_variants()) {
    auto c = NetworkConfig::desk(v);
    auto net = build_network<float>(c, 11);
    auto netd = net.cast<double>();
    Tensor x;
    bool same_branches = false;
    for (std::uint64_t seed = 12; seed < 40 && !same_branches; ++seed) {
      Rng rng(seed);
      x = testutil::randu<float>({4, 3, 16, 16}, rng, 0, 1);
      NoGradGuard ng;
      const auto zf = testutil::network_relu_inputs(net, x);
      const auto zd = testutil::network_relu_inputs(netd, x.cast<double>());
      same_branches = true;
      for (std::size_t k = 0; k < zf.size() && same_branches; ++k)
        for (std::size_t i = 0; i < zf[k].numel(); ++i)
          if ((zf[k][i] > 0) != (zd[k][i] > 0)) {
            same_branches = false;
            break;
          }
    }
    ASSERT_TRUE(same_branches) << variant_name(v);
    const std::vector<std::uint16_t> labels{1, 5, 9, 0};
    Tape<float>::current().clear();
    Tape<double>::current().clear();
    for (auto& p : net.parameters()) p.zero_grad();
    for (auto& p : netd.parameters()) p.zero_grad();
    backward(softmax_cross_entropy(net.forward(x), labels));
    backward(softmax_cross_entropy(netd.forward(x.cast<double>()), labels));
    const auto pf = net.parameters();
    const auto pd = netd.parameters();
    double num = 0, den = 0;
    for (std::size_t k = 0; k < pf.size(); ++k) {
      if (!pd[k].has_grad()) continue;
      for (std::size_t i = 0; i < pf[k].numel(); ++i) {
        const double gd = pd[k].grad()[i], gf = pf[k].has_grad() ? pf[k].grad()[i] : 0.0;
        num += (gf - gd) * (gf - gd);
        den += gd * gd;
      }
    }
    EXPECT_LT(std::sqrt(num / den), 1e-4) << variant_name(v);
    Tape<float>::current().clear();
    Tape<double>::current().clear();
  }
}
