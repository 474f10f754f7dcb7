#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ibn/blocks.hpp"
#include "ibn/dataset.hpp"
#include "ibn/transforms.hpp"

namespace ibn {

struct LrPolicy {
  enum class Kind { Step, Poly };
  Kind kind = Kind::Step;
  std::vector<double> milestones{0.5, 0.75};  // fractions of the total iteration count
  double factor = 0.1;
  double power = 0.9;

  bool operator==(const LrPolicy&) const = default;
};

// Step: base * factor^(milestones with t >= m*T); Poly: base * (1 - t/T)^power.
// Throws std::out_of_range unless t < T.
double lr_at(const LrPolicy& policy, double base_lr, std::size_t t, std::size_t total);

struct TrainConfig {
  double base_lr = 0.05;
  LrPolicy lr_policy;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  double data_fraction = 1.0;

  void validate() const;  // std::invalid_argument
  bool operator==(const TrainConfig&) const = default;
};

// Finetuning keeps the recipe but scales the learning rate by 0.3.
TrainConfig finetune_config(const TrainConfig& train_cfg);

struct SgdParam {
  Tensor param;
  bool decay = true;  // false for norm gamma/beta
  std::vector<float> velocity;
};

// All learnable tensors of `net`, with norm affine parameters exempt from decay.
std::vector<SgdParam> sgd_params(const Network<float>& net);

// v <- m*v + (g + wd*p); p <- p - lr*v. Checks every gradient first and throws
// NumericError on any non-finite value, leaving parameters untouched.
// Parameters without a gradient are treated as having g = 0.
void sgd_step(std::vector<SgdParam>& params, double lr, double momentum, double weight_decay);

struct Metrics {
  double top1_err = 0.0;  // percent
  double top5_err = 0.0;  // percent; top-k with k = min(5, classes)
  double loss = 0.0;
  std::size_t count = 0;
};

// logits is row-major [N, K]. Ties are resolved in favour of the lower class index.
Metrics metrics_from_logits(std::span<const float> logits, std::span<const std::uint16_t> labels, std::size_t K);

// Eval-mode forward over the bundle (the network is left in Eval mode).
Metrics evaluate(Network<float>& net, const DatasetBundle& data, const std::optional<TransformSpec>& transform = {},
                 std::size_t batch_size = 100);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;  // at the first iteration of the epoch
  double train_loss = 0.0;
  double train_top1_err = 0.0;
};

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::string checkpoint_path;
  double wall_clock_s = 0.0;
  bool diverged = false;
  std::optional<std::size_t> abort_iteration;
  std::string abort_reason;

  std::string to_json() const;
};

struct TrainResult {
  Network<float> net;
  RunRecord record;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

// Deterministic for a fixed seed when run single-threaded. A non-finite loss or
// gradient stops training; the record is marked diverged with the iteration.
// With `init` the weights (and running stats) start from a copy of it and
// `net_cfg` must describe the same architecture.
TrainResult train(const TrainConfig& cfg, const NetworkConfig& net_cfg, const DatasetBundle& data,
                  const Network<float>* init = nullptr, const ProgressFn& progress = {});

// train() started from `source`, on a stratified data_fraction subset of target.
TrainResult finetune(const Network<float>& source, const TrainConfig& cfg, const DatasetBundle& target,
                     const ProgressFn& progress = {});

std::string config_hash(const NetworkConfig& net_cfg, const TrainConfig& cfg);

}  // namespace ibn
