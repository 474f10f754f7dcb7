#include "ibn/divergence.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ibn {

GaussianFit fit_gaussian(std::span<const double> s) {
  if (s.size() < 2) throw std::invalid_argument("fit_gaussian: need at least 2 samples");
  double mu = 0.0;
  for (double v : s) {
    if (!std::isfinite(v)) throw std::domain_error("fit_gaussian: non-finite sample");
    mu += v;
  }
  mu /= static_cast<double>(s.size());
  double ss = 0.0;
  for (double v : s) ss += (v - mu) * (v - mu);
  const double var = ss / static_cast<double>(s.size() - 1);
  return {mu, std::max(var, kVarianceFloor)};
}

double kl_gauss(const GaussianFit& a, const GaussianFit& b) {
  if (!std::isfinite(a.mu) || !std::isfinite(b.mu) || !std::isfinite(a.var) || !std::isfinite(b.var))
    throw std::domain_error("kl_gauss: non-finite parameters");
  if (!(a.var > 0.0) || !(b.var > 0.0)) throw std::domain_error("kl_gauss: variance must be positive");
  const double d = a.mu - b.mu;
  const double kl = 0.5 * std::log(b.var / a.var) + (a.var + d * d) / (2.0 * b.var) - 0.5;
  return std::max(kl, 0.0);  // clamp rounding noise around identical fits
}

double sym_kl(const GaussianFit& a, const GaussianFit& b) { return kl_gauss(a, b) + kl_gauss(b, a); }

std::vector<ChannelMeanSamples> probe_activations(Network<float>& net, const DatasetBundle& bundle,
                                                  const std::vector<std::size_t>& probe_points,
                                                  std::size_t batch_size) {
  const auto names = net.probe_names();
  std::vector<std::size_t> probes = probe_points;
  if (probes.empty())
    for (std::size_t i = 0; i < names.size(); ++i) probes.push_back(i);
  for (auto p : probes)
    if (p >= names.size())
      throw std::out_of_range("probe " + std::to_string(p) + " not in model (it has " + std::to_string(names.size()) +
                              " probes)");
  const auto& sh = bundle.images.shape();
  if (sh.size() != 4) throw ShapeError("probe_activations: images must be [N,C,H,W]");
  const std::size_t N = sh[0], per = sh[1] * sh[2] * sh[3];
  if (batch_size == 0) batch_size = 1;

  net.set_mode(Mode::Eval);
  NoGradGuard ng;
  std::vector<ChannelMeanSamples> out(probes.size());
  for (std::size_t k = 0; k < probes.size(); ++k) {
    out[k].layer_index = probes[k];
    out[k].layer_name = names[probes[k]];
    out[k].images = N;
  }
  const float* src = bundle.images.data().data();
  for (std::size_t n0 = 0; n0 < N; n0 += batch_size) {
    const std::size_t nb = std::min(batch_size, N - n0);
    Tensor x({nb, sh[1], sh[2], sh[3]}, std::vector<float>(src + n0 * per, src + (n0 + nb) * per));
    std::vector<Tensor> acts;
    net.forward(x, &acts);
    for (std::size_t k = 0; k < probes.size(); ++k) {
      const Tensor& a = acts[probes[k]];
      const std::size_t C = a.dim(1), HW = a.dim(2) * a.dim(3);
      auto& o = out[k];
      if (o.values.empty()) {
        o.channels = C;
        o.values.assign(C * N, 0.0);
      }
      const float* p = a.data().data();
      for (std::size_t n = 0; n < nb; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          const float* q = p + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) acc += q[i];
          o.values[c * N + n0 + n] = acc / static_cast<double>(HW);
        }
    }
  }
  return out;
}

double layer_divergence(const ChannelMeanSamples& a, const ChannelMeanSamples& b) {
  if (a.channels != b.channels) {
    throw std::invalid_argument("layer_divergence: channel count mismatch (" + std::to_string(a.channels) + " vs " +
                                std::to_string(b.channels) + ")");
  }
  if (a.images < kMinDivergenceImages || b.images < kMinDivergenceImages) {
    throw std::invalid_argument("layer_divergence: need at least " + std::to_string(kMinDivergenceImages) +
                                " images per domain");
  }
  if (a.channels == 0) throw std::invalid_argument("layer_divergence: layer has no channels");
  double acc = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c) acc += sym_kl(fit_gaussian(a.channel(c)), fit_gaussian(b.channel(c)));
  return acc / static_cast<double>(a.channels);
}

DivergenceReport divergence_report(const std::vector<ChannelMeanSamples>& a, const std::vector<ChannelMeanSamples>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("divergence_report: probe lists differ in length");
  DivergenceReport r;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].layer_index != b[i].layer_index) throw std::invalid_argument("divergence_report: probe lists differ");
    r.layers.push_back({a[i].layer_index, a[i].layer_name, layer_divergence(a[i], b[i])});
  }
  return r;
}

DivergenceReport divergence_report(Network<float>& net, const DatasetBundle& a, const DatasetBundle& b,
                                   const std::vector<std::size_t>& probe_points) {
  auto r = divergence_report(probe_activations(net, a, probe_points), probe_activations(net, b, probe_points));
  r.domain_a = a.domain_tag;
  r.domain_b = b.domain_tag;
  return r;
}

namespace {

// Round-trippable, locale-independent number formatting.
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string o = "\"";
  for (char c : s) {
    if (c == '"') o += '"';
    o += c;
  }
  return o + "\"";
}

}  // namespace

std::string DivergenceReport::to_csv() const {
  std::string s = "layer_index,layer_name,divergence\n";
  for (const auto& l : layers) s += std::to_string(l.layer_index) + "," + csv_field(l.layer_name) + "," + num(l.divergence) + "\n";
  return s;
}

std::string DivergenceReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "divergence_report";
  j["domain_a"] = domain_a;
  j["domain_b"] = domain_b;
  j["checkpoint_id"] = checkpoint_id;
  j["display_multiplier"] = display_multiplier;
  auto& arr = j["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : layers) arr.push_back({{"layer_index", l.layer_index}, {"layer_name", l.layer_name}, {"divergence", l.divergence}});
  return j.dump(2) + "\n";
}

HalfAverages half_averages(const DivergenceReport& r) {
  const std::size_t L = r.layers.size(), h = L / 2;
  if (h == 0) throw std::invalid_argument("half_averages: need at least 2 layers");
  HalfAverages out;
  for (std::size_t i = 0; i < h; ++i) {
    out.first += r.layers[i].divergence;
    out.second += r.layers[L - h + i].divergence;
  }
  out.first /= static_cast<double>(h);
  out.second /= static_cast<double>(h);
  return out;
}

}  // namespace ibn
