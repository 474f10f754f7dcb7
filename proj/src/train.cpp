#include "ibn/train.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "ibn/errors.hpp"
#include "ibn/persist.hpp"
#include "ibn/rng.hpp"
#include "json.hpp"

namespace ibn {

double lr_at(const LrPolicy& p, double base, std::size_t t, std::size_t total) {
  if (t >= total) {
    throw std::out_of_range("lr_at: iteration " + std::to_string(t) + " not below total " + std::to_string(total));
  }
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  if (p.kind == LrPolicy::Kind::Poly) return base * std::pow(1.0 - frac, p.power);
  double lr = base;
  for (double m : p.milestones)
    if (static_cast<double>(t) >= m * static_cast<double>(total)) lr *= p.factor;
  return lr;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) fail("base_lr must be > 0");
  if (!(data_fraction > 0.0 && data_fraction <= 1.0)) fail("data_fraction must lie in (0, 1]");
  if (batch_size < 2) fail("batch_size must be >= 2 (batch norm needs two samples)");
  if (epochs == 0) fail("epochs must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (lr_policy.kind == LrPolicy::Kind::Step) {
    if (!(lr_policy.factor > 0.0)) fail("step factor must be > 0");
    for (double m : lr_policy.milestones)
      if (!(m > 0.0 && m < 1.0)) fail("step milestones are fractions in (0, 1)");
  } else if (!(lr_policy.power > 0.0)) {
    fail("poly power must be > 0");
  }
}

TrainConfig finetune_config(const TrainConfig& c) {
  TrainConfig f = c;
  f.base_lr = 0.3 * c.base_lr;
  return f;
}

std::vector<SgdParam> sgd_params(const Network<float>& net) {
  std::vector<SgdParam> out;
  for (const auto& nt : net.named_tensors()) {
    if (nt.role == TensorRole::RunningStat) continue;
    out.push_back({nt.tensor, nt.role != TensorRole::NormAffine, std::vector<float>(nt.tensor.numel(), 0.0f)});
  }
  return out;
}

void sgd_step(std::vector<SgdParam>& params, double lr, double momentum, double wd) {
  for (const auto& p : params) {
    if (p.velocity.size() != p.param.numel()) throw ShapeError("sgd_step: velocity does not match parameter");
    if (!p.param.has_grad()) continue;
    if (p.param.grad().size() != p.param.numel()) throw ShapeError("sgd_step: gradient does not match parameter");
    for (float g : p.param.grad())
      if (!std::isfinite(g)) throw NumericError("sgd_step: non-finite gradient");
  }
  const float m = static_cast<float>(momentum), lrf = static_cast<float>(lr);
  for (auto& p : params) {
    auto w = p.param.data();
    const bool has = p.param.has_grad();
    const auto g = p.param.grad();
    const float d = p.decay ? static_cast<float>(wd) : 0.0f;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = (has ? g[i] : 0.0f) + d * w[i];
      p.velocity[i] = m * p.velocity[i] + gi;
      w[i] -= lrf * p.velocity[i];
    }
  }
}

Metrics metrics_from_logits(std::span<const float> logits, std::span<const std::uint16_t> labels, std::size_t K) {
  const std::size_t N = labels.size();
  if (K == 0 || logits.size() != N * K) throw ShapeError("metrics: logits do not match [N, K]");
  Metrics m;
  m.count = N;
  if (N == 0) return m;
  const std::size_t k5 = std::min<std::size_t>(5, K);
  std::size_t wrong1 = 0, wrong5 = 0;
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const float* row = logits.data() + n * K;
    const std::size_t y = labels[n];
    if (y >= K) throw std::out_of_range("metrics: label " + std::to_string(y) + " >= " + std::to_string(K));
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max<double>(mx, row[k]);
    double se = 0.0;
    for (std::size_t k = 0; k < K; ++k) se += std::exp(row[k] - mx);
    loss += mx + std::log(se) - row[y];
    std::size_t rank = 0;
    for (std::size_t k = 0; k < K; ++k)
      if (row[k] > row[y] || (row[k] == row[y] && k < y)) ++rank;
    wrong1 += rank >= 1;
    wrong5 += rank >= k5;
  }
  m.top1_err = 100.0 * static_cast<double>(wrong1) / static_cast<double>(N);
  m.top5_err = 100.0 * static_cast<double>(wrong5) / static_cast<double>(N);
  m.loss = loss / static_cast<double>(N);
  return m;
}

namespace {

void check_data(const DatasetBundle& d, const NetworkConfig& c, const char* who) {
  const auto& sh = d.images.shape();
  if (sh.size() != 4 || sh[0] != d.size() || sh[1] != c.in_channels) {
    throw ShapeError(std::string(who) + ": images " + shape_str(sh) + " do not fit the network input");
  }
  if (d.num_classes != c.num_classes) {
    throw ShapeError(std::string(who) + ": data has " + std::to_string(d.num_classes) + " classes, network " +
                     std::to_string(c.num_classes));
  }
}

Tensor gather(const DatasetBundle& d, std::span<const std::size_t> idx, std::vector<std::uint16_t>& labels) {
  const auto& sh = d.images.shape();
  const std::size_t per = sh[1] * sh[2] * sh[3];
  Tensor x({idx.size(), sh[1], sh[2], sh[3]});
  const float* src = d.images.data().data();
  float* dst = x.data().data();
  labels.resize(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    std::copy_n(src + idx[j] * per, per, dst + j * per);
    labels[j] = d.labels[idx[j]];
  }
  return x;
}

struct TapeGuard {
  ~TapeGuard() { Tape<float>::current().clear(); }
};

}  // namespace

Metrics evaluate(Network<float>& net, const DatasetBundle& data, const std::optional<TransformSpec>& transform,
                 std::size_t batch_size) {
  check_data(data, net.config, "evaluate");
  const DatasetBundle* src = &data;
  DatasetBundle transformed;
  if (transform) {
    transformed = transform_bundle(data, *transform);
    src = &transformed;
  }
  net.set_mode(Mode::Eval);
  NoGradGuard ng;
  const std::size_t N = src->size(), K = net.config.num_classes;
  std::vector<float> logits(N * K);
  std::vector<std::size_t> idx;
  std::vector<std::uint16_t> lab;
  if (batch_size == 0) batch_size = 1;
  for (std::size_t n0 = 0; n0 < N; n0 += batch_size) {
    const std::size_t nb = std::min(batch_size, N - n0);
    idx.resize(nb);
    for (std::size_t j = 0; j < nb; ++j) idx[j] = n0 + j;
    Tensor out = net.forward(gather(*src, idx, lab));
    std::copy(out.data().begin(), out.data().end(), logits.begin() + static_cast<std::ptrdiff_t>(n0 * K));
  }
  return metrics_from_logits(logits, src->labels, K);
}

std::string config_hash(const NetworkConfig& net_cfg, const TrainConfig& cfg) {
  const std::string s = run_config_json(net_cfg, cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TrainResult train(const TrainConfig& cfg, const NetworkConfig& net_cfg, const DatasetBundle& data,
                  const Network<float>* init, const ProgressFn& progress) {
  cfg.validate();
  net_cfg.validate();
  check_data(data, net_cfg, "train");
  if (init && !(init->config == net_cfg)) throw std::invalid_argument("train: initial network has a different config");
  const auto t_start = std::chrono::steady_clock::now();

  const DatasetBundle sub = cfg.data_fraction < 1.0 ? stratified_subset(data, cfg.data_fraction, cfg.seed) : data;
  const std::size_t N = sub.size(), B = cfg.batch_size;
  const std::size_t per_epoch = N / B + (N % B >= 2 ? 1 : 0);
  if (per_epoch == 0) throw std::invalid_argument("train: need at least 2 training images");
  const std::size_t total = per_epoch * cfg.epochs;

  TrainResult res{init ? init->cast<float>() : build_network<float>(net_cfg, cfg.seed), {}};
  auto& net = res.net;
  auto& rec = res.record;
  rec.config_hash = config_hash(net_cfg, cfg);
  rec.seed = cfg.seed;

  auto params = sgd_params(net);
  Rng shuffle_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL);
  std::vector<std::size_t> order(N);
  std::vector<std::uint16_t> labels;
  std::size_t t = 0;
  TapeGuard tape_guard;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    EpochRecord er;
    er.epoch = epoch;
    er.lr = lr_at(cfg.lr_policy, cfg.base_lr, t, total);
    double loss_sum = 0.0;
    std::size_t seen = 0, wrong = 0;
    net.set_mode(Mode::Train);
    for (std::size_t b = 0; b < per_epoch; ++b, ++t) {
      const std::size_t lo = b * B, nb = std::min(B, N - lo);
      Tensor x = gather(sub, std::span<const std::size_t>(order).subspan(lo, nb), labels);
      const double lr = lr_at(cfg.lr_policy, cfg.base_lr, t, total);
      for (auto& p : params) p.param.zero_grad();
      Tensor logits = net.forward(x);
      Tensor loss = softmax_cross_entropy(logits, std::span<const std::uint16_t>(labels));
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        rec.diverged = true;
        rec.abort_iteration = t;
        rec.abort_reason = "non-finite loss";
        Tape<float>::current().clear();
        break;
      }
      backward(loss);
      Tape<float>::current().clear();
      try {
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay);
      } catch (const NumericError& e) {
        rec.diverged = true;
        rec.abort_iteration = t;
        rec.abort_reason = e.what();
        break;
      }
      const auto mt = metrics_from_logits(logits.data(), labels, net_cfg.num_classes);
      loss_sum += lv * static_cast<double>(nb);
      wrong += static_cast<std::size_t>(std::lround(mt.top1_err * static_cast<double>(nb) / 100.0));
      seen += nb;
    }
    if (seen > 0) {
      er.train_loss = loss_sum / static_cast<double>(seen);
      er.train_top1_err = 100.0 * static_cast<double>(wrong) / static_cast<double>(seen);
    }
    rec.epochs.push_back(er);
    if (progress) progress(er);
    if (rec.diverged) break;
  }
  net.set_mode(Mode::Eval);
  rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

TrainResult finetune(const Network<float>& source, const TrainConfig& cfg, const DatasetBundle& target,
                     const ProgressFn& progress) {
  return train(cfg, source.config, target, &source, progress);
}

std::string RunRecord::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["kind"] = "run_record";
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["checkpoint_path"] = checkpoint_path;
  j["wall_clock_s"] = wall_clock_s;
  j["diverged"] = diverged;
  if (abort_iteration) {
    j["abort_iteration"] = *abort_iteration;
    j["abort_reason"] = abort_reason;
  }
  auto& ep = j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : epochs)
    ep.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"train_top1_err", e.train_top1_err}});
  return j.dump(2) + "\n";
}

}  // namespace ibn
