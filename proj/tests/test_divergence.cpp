#include <gtest/gtest.h>

#include "ibn/dataset.hpp"
#include "ibn/divergence.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace ibn;

namespace {

ChannelMeanSamples samples(std::size_t channels, std::size_t images, Rng& rng, double shift = 0.0) {
  ChannelMeanSamples s;
  s.channels = channels;
  s.images = images;
  s.layer_name = "layer";
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < images; ++n) s.values.push_back(rng.normal(shift + 0.3 * double(c), 1.0 + 0.2 * c));
  return s;
}

ChannelMeanSamples duplicated(const ChannelMeanSamples& s) {
  ChannelMeanSamples d = s;
  d.images = 2 * s.images;
  d.values.clear();
  for (std::size_t c = 0; c < s.channels; ++c)
    for (int rep = 0; rep < 2; ++rep)
      for (double v : s.channel(c)) d.values.push_back(v);
  return d;
}

// Direct transcription of the per-channel definition.
double naive_layer_divergence(const ChannelMeanSamples& a, const ChannelMeanSamples& b) {
  double total = 0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    double fit[2][2];
    const ChannelMeanSamples* s[2] = {&a, &b};
    for (int k = 0; k < 2; ++k) {
      const auto v = s[k]->channel(c);
      double m = 0, q = 0;
      for (double x : v) m += x;
      m /= double(v.size());
      for (double x : v) q += (x - m) * (x - m);
      fit[k][0] = m;
      fit[k][1] = std::max(q / double(v.size() - 1), 1e-8);
    }
    auto kl = [](const double* p, const double* r) {
      return std::log(std::sqrt(r[1]) / std::sqrt(p[1])) + (p[1] + (p[0] - r[0]) * (p[0] - r[0])) / (2 * r[1]) - 0.5;
    };
    total += kl(fit[0], fit[1]) + kl(fit[1], fit[0]);
  }
  return total / double(a.channels);
}

}  // namespace

TEST(KL, HandCases) {
  EXPECT_EQ(kl_gauss({0, 1}, {0, 1}), 0.0);
  EXPECT_NEAR(kl_gauss({0, 1}, {1, 1}), 0.5, 1e-12);
  EXPECT_NEAR(sym_kl({0, 1}, {1, 1}), 1.0, 1e-9);
  EXPECT_NEAR(sym_kl({0, 1}, {0, 4}), 1.125, 1e-9);
  EXPECT_THROW(kl_gauss({0, 0}, {0, 1}), std::domain_error);
  EXPECT_THROW(kl_gauss({NAN, 1}, {0, 1}), std::domain_error);
  EXPECT_THROW(kl_gauss({0, 1}, {0, INFINITY}), std::domain_error);
}

TEST(KL, SymmetryAndNonNegativity) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    GaussianFit a{rng.normal(0, 3), std::exp(rng.normal(0, 2))}, b{rng.normal(0, 3), std::exp(rng.normal(0, 2))};
    EXPECT_EQ(sym_kl(a, b), sym_kl(b, a));
    EXPECT_GE(kl_gauss(a, b), 0.0);
  }
}

TEST(KL, MonteCarloNormalVsWide) {
  // E_a[log p_a(x) - log p_b(x)] with 1e6 samples, a = N(0,1), b = N(0,4)
  Rng rng(2);
  const GaussianFit a{0, 1}, b{0, 4};
  double acc = 0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    acc += -0.5 * std::log(a.var) - x * x / (2 * a.var) + 0.5 * std::log(b.var) + x * x / (2 * b.var);
  }
  EXPECT_NEAR(acc / n, kl_gauss(a, b), 0.01);
}

TEST(Fit, UnbiasedWithFloor) {
  const std::vector<double> v{1, 2, 3, 4};
  auto f = fit_gaussian(v);
  EXPECT_DOUBLE_EQ(f.mu, 2.5);
  EXPECT_DOUBLE_EQ(f.var, 5.0 / 3.0);
  const std::vector<double> dead(10, 0.0);
  EXPECT_EQ(fit_gaussian(dead).var, kVarianceFloor);
  EXPECT_THROW(fit_gaussian(std::vector<double>{1.0}), std::invalid_argument);
  EXPECT_THROW(fit_gaussian(std::vector<double>{1.0, NAN}), std::domain_error);
}

TEST(Layer, MeanOverChannels) {
  // channel 0: identical fits (0); channel 1: means 0 vs 1 at unit variance (1.0)
  ChannelMeanSamples a, b;
  a.channels = b.channels = 2;
  a.images = b.images = 8;
  const double pm[8] = {1, -1, 1, -1, 1, -1, 1, -1};
  const double scale = std::sqrt(7.0 / 8.0);  // unbiased variance exactly 1
  for (int c = 0; c < 2; ++c)
    for (int n = 0; n < 8; ++n) {
      a.values.push_back(pm[n] * scale);
      b.values.push_back(pm[n] * scale + (c == 1 ? 1.0 : 0.0));
    }
  EXPECT_NEAR(layer_divergence(a, b), 0.5, 1e-12);
  // two channels at divergences 1 and 3 average to 2
  DivergenceReport r;
  r.layers = {{0, "x", 1.0}, {1, "y", 3.0}};
  EXPECT_DOUBLE_EQ((r.layers[0].divergence + r.layers[1].divergence) / 2, 2.0);
}

TEST(Layer, Errors) {
  Rng rng(3);
  auto a = samples(3, 10, rng), b = samples(4, 10, rng), small = samples(3, 7, rng);
  EXPECT_THROW(layer_divergence(a, b), std::invalid_argument);
  EXPECT_THROW(layer_divergence(a, small), std::invalid_argument);
}

TEST(Layer, MatchesNaiveOracle) {
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    auto a = samples(5, 30, rng), b = samples(5, 40, rng, 0.5);
    const double fast = layer_divergence(a, b), slow = naive_layer_divergence(a, b);
    EXPECT_NEAR(fast, slow, 1e-12 * (1 + slow));
  }
}

TEST(Layer, DuplicationOnlyRescalesVariance) {
  // Unbiased fits scale both variances by (2n-2)/(2n-1) under duplication:
  // the variance-ratio terms are unchanged, the mean-gap terms grow by the
  // inverse factor. So D <= D_dup <= D * (2n-1)/(2n-2).
  Rng rng(5);
  for (std::size_t n : {10u, 100u, 1000u}) {
    auto a = samples(4, n, rng), b = samples(4, n, rng, 0.7);
    const double d = layer_divergence(a, b), dd = layer_divergence(duplicated(a), duplicated(b));
    EXPECT_GE(dd, d * (1 - 1e-12));
    EXPECT_LE(dd, d * (2.0 * n - 1) / (2.0 * n - 2) * (1 + 1e-12));
  }
}

TEST(Report, SymmetricIdenticalAndFormats) {
  auto net = build_network<float>(NetworkConfig::desk(BlockVariant::Baseline), 3);
  auto A = gen_dataset(4, 4, domain_preset("domA"), 1), B = gen_dataset(4, 4, domain_preset("domB"), 1);
  auto ab = divergence_report(net, A, B), ba = divergence_report(net, B, A), aa = divergence_report(net, A, A);
  ASSERT_EQ(ab.layers.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_NEAR(ab.layers[i].divergence, ba.layers[i].divergence, 1e-12 * (1 + ab.layers[i].divergence));
    EXPECT_GE(ab.layers[i].divergence, 0.0);
    EXPECT_LT(aa.layers[i].divergence, 1e-10);
  }
  EXPECT_EQ(ab.domain_a, "domA");
  const auto csv = ab.to_csv();
  EXPECT_EQ(csv.rfind("layer_index,layer_name,divergence\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
  EXPECT_EQ(csv, divergence_report(net, A, B).to_csv());
  auto j = nlohmann::json::parse(ab.to_json());
  EXPECT_EQ(j["schema_version"], 1);
  EXPECT_EQ(j["layers"].size(), 9u);
  EXPECT_EQ(j["display_multiplier"], 1.0);
}

TEST(Probe, ChannelMeansAndZeroInput) {
  auto net = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_a), 2);
  auto A = gen_dataset(2, 3, domain_preset("domA"), 1);
  auto s = probe_activations(net, A, {0, 4});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[1].layer_index, 4u);
  EXPECT_EQ(s[0].channels, 16u);
  EXPECT_EQ(s[0].images, 6u);
  // F equals the spatial mean of the probed map
  std::vector<Tensor> probes;
  net.set_mode(Mode::Eval);
  Tensor one({1, 3, 32, 32}, std::vector<float>(A.images.data().begin(), A.images.data().begin() + 3 * 32 * 32));
  net.forward(one, &probes);
  const auto m = reduce_mean(probes[4], {2, 3});
  for (std::size_t c = 0; c < s[1].channels; ++c) EXPECT_NEAR(s[1].channel(c)[0], m[c], 1e-5);
  EXPECT_THROW(probe_activations(net, A, {9}), std::out_of_range);

  DatasetBundle zeros;
  zeros.images = Tensor({2, 3, 32, 32});
  zeros.labels = {0, 1};
  zeros.num_classes = 10;
  auto stem = build_network<float>(NetworkConfig::desk(BlockVariant::Baseline), 1);
  stem.stem_norm = MixedNorm<float>::instance(16);  // IN maps a constant map to beta = 0
  const auto z = probe_activations(stem, zeros, {0});
  for (double v : z[0].values) EXPECT_EQ(v, 0.0);
}

TEST(Report, HalfAverages) {
  DivergenceReport r;
  for (std::size_t i = 0; i < 9; ++i) r.layers.push_back({i, "l", double(i)});
  auto h = half_averages(r);
  EXPECT_DOUBLE_EQ(h.first, 1.5);   // layers 0..3
  EXPECT_DOUBLE_EQ(h.second, 6.5);  // layers 5..8
}
