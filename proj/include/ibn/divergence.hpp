#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ibn/blocks.hpp"
#include "ibn/dataset.hpp"

namespace ibn {

// Feature divergence between two domains: per channel, fit a Gaussian to the
// per-image channel means F, take the symmetric KL divergence of the two fits,
// and average over the channels of a layer.

constexpr double kVarianceFloor = 1e-8;
constexpr std::size_t kMinDivergenceImages = 8;

struct GaussianFit {
  double mu = 0.0;
  double var = 1.0;  // unbiased sample variance, at least kVarianceFloor
};

// Needs at least 2 finite samples (std::invalid_argument / std::domain_error).
GaussianFit fit_gaussian(std::span<const double> samples);

// KL(a || b) = log(sb/sa) + (va + (ma-mb)^2) / (2 vb) - 1/2.
// Throws std::domain_error for non-finite input or non-positive variance.
double kl_gauss(const GaussianFit& a, const GaussianFit& b);
double sym_kl(const GaussianFit& a, const GaussianFit& b);

// Channel means of one probed layer: values[c * images + n].
struct ChannelMeanSamples {
  std::size_t layer_index = 0;
  std::string layer_name;
  std::size_t channels = 0;
  std::size_t images = 0;
  std::vector<double> values;

  std::span<const double> channel(std::size_t c) const { return {values.data() + c * images, images}; }
};

// Runs the network in Eval mode (the mode is left at Eval) over `bundle` and
// records channel means at the requested probes (all probes when empty).
// Throws std::out_of_range for a probe index the network does not have.
std::vector<ChannelMeanSamples> probe_activations(Network<float>& net, const DatasetBundle& bundle,
                                                  const std::vector<std::size_t>& probe_points = {},
                                                  std::size_t batch_size = 100);

// Mean over channels of sym_kl between per-channel fits. Requires matching
// channel counts and at least kMinDivergenceImages images on each side.
double layer_divergence(const ChannelMeanSamples& a, const ChannelMeanSamples& b);

struct LayerDivergence {
  std::size_t layer_index = 0;
  std::string layer_name;
  double divergence = 0.0;
};

struct DivergenceReport {
  static constexpr int kSchemaVersion = 1;
  std::string domain_a, domain_b;
  std::string checkpoint_id;
  std::vector<LayerDivergence> layers;
  // Presentation-only scale (figures often enlarge small values); stored
  // divergences are always raw.
  double display_multiplier = 1.0;

  std::string to_csv() const;
  std::string to_json() const;
};

DivergenceReport divergence_report(const std::vector<ChannelMeanSamples>& a, const std::vector<ChannelMeanSamples>& b);
DivergenceReport divergence_report(Network<float>& net, const DatasetBundle& a, const DatasetBundle& b,
                                   const std::vector<std::size_t>& probe_points = {});

// Averages of the first floor(L/2) and the last floor(L/2) layers.
struct HalfAverages {
  double first = 0.0;
  double second = 0.0;
};
HalfAverages half_averages(const DivergenceReport& r);

}  // namespace ibn
