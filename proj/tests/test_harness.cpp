#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ibn/dataset.hpp"
#include "ibn/errors.hpp"
#include "ibn/kernels.hpp"
#include "ibn/persist.hpp"
#include "ibn/train.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace ibn;

namespace {

// Leaf with the given values whose gradient is set to g by a backward pass.
SgdParam param_with_grad(std::vector<float> p, std::vector<float> g, bool decay = true) {
  const Shape shape{p.size()};
  Tensor t(shape, std::move(p));
  t.set_requires_grad();
  backward(sum(mul(t, Tensor(shape, std::move(g)))));
  Tape<float>::current().clear();
  return {t, decay, std::vector<float>(t.numel(), 0.0f)};
}

TrainConfig quick(std::size_t epochs = 1) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.base_lr = 0.05;
  return c;
}

NetworkConfig small_net(BlockVariant v, std::size_t classes) {
  auto n = NetworkConfig::desk(v);
  n.num_classes = classes;
  return n;
}

}  // namespace

TEST(Sgd, FirstStepWithoutMomentum) {
  std::vector<SgdParam> ps{param_with_grad({1.0f, -2.0f}, {0.5f, 0.25f})};
  sgd_step(ps, 0.1, 0.0, 0.0);
  EXPECT_FLOAT_EQ(ps[0].param[0], 0.95f);
  EXPECT_FLOAT_EQ(ps[0].param[1], -2.025f);
}

TEST(Sgd, ZeroGradientNoDecayLeavesParameters) {
  std::vector<SgdParam> ps{param_with_grad({1.5f, 3.0f}, {0.0f, 0.0f})};
  for (int i = 0; i < 3; ++i) sgd_step(ps, 0.1, 0.9, 0.0);
  EXPECT_EQ(ps[0].param[0], 1.5f);
  EXPECT_EQ(ps[0].param[1], 3.0f);
}

TEST(Sgd, MomentumAccumulates) {
  // p=1, g=1, lr=1, m=0.9: v=1, p=0; then v=1.9, p=-1.9
  std::vector<SgdParam> ps{param_with_grad({1.0f}, {1.0f})};
  sgd_step(ps, 1.0, 0.9, 0.0);
  EXPECT_FLOAT_EQ(ps[0].param[0], 0.0f);
  sgd_step(ps, 1.0, 0.9, 0.0);
  EXPECT_FLOAT_EQ(ps[0].param[0], -1.9f);
}

TEST(Sgd, DecayExemption) {
  std::vector<SgdParam> ps{param_with_grad({2.0f}, {0.0f}, true), param_with_grad({2.0f}, {0.0f}, false)};
  sgd_step(ps, 0.5, 0.0, 0.1);
  EXPECT_FLOAT_EQ(ps[0].param[0], 1.9f);
  EXPECT_EQ(ps[1].param[0], 2.0f);

  auto net = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_a), 1);
  std::size_t exempt = 0;
  for (const auto& p : sgd_params(net)) exempt += !p.decay;
  std::size_t norm_affine = 0;
  for (const auto& nt : net.named_tensors()) norm_affine += nt.role == TensorRole::NormAffine;
  EXPECT_EQ(exempt, norm_affine);
}

TEST(Sgd, NonFiniteGradientRejectedAtomically) {
  std::vector<SgdParam> ps{param_with_grad({1.0f}, {0.5f}), param_with_grad({1.0f, 2.0f}, {0.5f, NAN})};
  EXPECT_THROW(sgd_step(ps, 0.1, 0.9, 1e-4), NumericError);
  EXPECT_EQ(ps[0].param[0], 1.0f);
  EXPECT_EQ(ps[1].param[0], 1.0f);
  EXPECT_EQ(ps[1].param[1], 2.0f);
}

TEST(LrSchedule, PolyAndStep) {
  LrPolicy poly{LrPolicy::Kind::Poly};
  EXPECT_NEAR(lr_at(poly, 0.01, 50, 100), 0.01 * std::pow(0.5, 0.9), 1e-12);
  EXPECT_NEAR(lr_at(poly, 0.01, 50, 100), 0.005359, 1e-6);
  EXPECT_DOUBLE_EQ(lr_at(poly, 0.01, 0, 100), 0.01);
  LrPolicy step;
  EXPECT_DOUBLE_EQ(lr_at(step, 0.1, 49, 100), 0.1);
  EXPECT_NEAR(lr_at(step, 0.1, 50, 100), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(step, 0.1, 80, 100), 0.001, 1e-15);
  EXPECT_THROW(lr_at(step, 0.1, 100, 100), std::out_of_range);
  EXPECT_THROW(lr_at(poly, 0.1, 0, 0), std::out_of_range);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  using Mutate = void (*)(TrainConfig&);
  for (Mutate bad : std::initializer_list<Mutate>{[](TrainConfig& t) { t.base_lr = 0; }, [](TrainConfig& t) { t.momentum = 1.0; },
                   [](TrainConfig& t) { t.batch_size = 1; }, [](TrainConfig& t) { t.data_fraction = 0; },
                   [](TrainConfig& t) { t.data_fraction = 1.5; }, [](TrainConfig& t) { t.epochs = 0; },
                   [](TrainConfig& t) { t.weight_decay = -1; }}) {
    TrainConfig t;
    bad(t);
    EXPECT_THROW(t.validate(), std::invalid_argument);
  }
  EXPECT_NEAR(finetune_config(c).base_lr, 0.3 * c.base_lr, 1e-15);
}

TEST(Metrics, PerfectAndHandCases) {
  const std::vector<float> logits{3, 1, 0, 0, 0, 9, 1, 2};
  const std::vector<std::uint16_t> labels{0, 1};
  auto m = metrics_from_logits(logits, labels, 4);
  EXPECT_EQ(m.top1_err, 0.0);
  EXPECT_EQ(m.top5_err, 0.0);
  EXPECT_EQ(m.count, 2u);
  const std::vector<std::uint16_t> wrong{1, 1};
  EXPECT_EQ(metrics_from_logits(logits, wrong, 4).top1_err, 50.0);
  // ties go to the lower index
  const std::vector<float> tie{1, 1};
  EXPECT_EQ(metrics_from_logits(tie, std::vector<std::uint16_t>{0}, 2).top1_err, 0.0);
  EXPECT_EQ(metrics_from_logits(tie, std::vector<std::uint16_t>{1}, 2).top1_err, 100.0);
}

TEST(Metrics, RandomLogitsAndShuffleInvariance) {
  Rng rng(7);
  const std::size_t N = 1000, K = 10;
  std::vector<float> logits(N * K);
  std::vector<std::uint16_t> labels(N);
  for (auto& v : logits) v = float(rng.normal());
  for (auto& l : labels) l = std::uint16_t(rng.below(K));
  auto m = metrics_from_logits(logits, labels, K);
  EXPECT_NEAR(m.top1_err, 90.0, 5.0);
  EXPECT_NEAR(m.top5_err, 50.0, 5.0);
  EXPECT_LE(m.top5_err, m.top1_err);

  std::vector<std::size_t> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<float> l2(N * K);
  std::vector<std::uint16_t> y2(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::copy_n(logits.begin() + perm[i] * K, K, l2.begin() + i * K);
    y2[i] = labels[perm[i]];
  }
  auto m2 = metrics_from_logits(l2, y2, K);
  EXPECT_EQ(m.top1_err, m2.top1_err);
  EXPECT_EQ(m.top5_err, m2.top5_err);
  EXPECT_NEAR(m.loss, m2.loss, 1e-9);
}

TEST(Training, SmokeAndDeterminism) {
  kernels::set_num_threads(1);
  auto data = gen_dataset(4, 16, domain_preset("domA"), 3);
  auto net_cfg = small_net(BlockVariant::IBN_a, 4);
  auto a = train(quick(2), net_cfg, data), b = train(quick(2), net_cfg, data);
  kernels::set_num_threads(0);
  EXPECT_FALSE(a.record.diverged);
  ASSERT_EQ(a.record.epochs.size(), 2u);
  EXPECT_TRUE(std::isfinite(a.record.epochs[1].train_loss));
  EXPECT_EQ(encode_checkpoint(a.net), encode_checkpoint(b.net));
  EXPECT_EQ(a.record.config_hash, b.record.config_hash);
  auto m = evaluate(a.net, data);
  EXPECT_EQ(m.count, 64u);
  auto j = nlohmann::json::parse(a.record.to_json());
  EXPECT_EQ(j["epochs"].size(), 2u);
  EXPECT_FALSE(j["diverged"].get<bool>());
}

TEST(Training, DataFractionUsesStratifiedSubset) {
  auto data = gen_dataset(4, 10, domain_preset("domA"), 3);
  auto sub = stratified_subset(data, 0.3, 1);
  EXPECT_EQ(sub.size(), 12u);
  for (std::uint16_t k = 0; k < 4; ++k) EXPECT_EQ(std::count(sub.labels.begin(), sub.labels.end(), k), 3);
  auto cfg = quick(1);
  cfg.data_fraction = 0.3;
  cfg.batch_size = 4;
  std::size_t seen = 0;
  auto r = train(cfg, small_net(BlockVariant::Baseline, 4), data, nullptr, [&](const EpochRecord&) { ++seen; });
  EXPECT_EQ(seen, 1u);
  EXPECT_FALSE(r.record.diverged);
}

TEST(Training, DivergenceIsRecorded) {
  auto data = gen_dataset(2, 8, domain_preset("domA"), 3);
  auto cfg = quick(3);
  cfg.base_lr = 1e30;
  cfg.momentum = 0.0;
  auto r = train(cfg, small_net(BlockVariant::Baseline, 2), data);
  EXPECT_TRUE(r.record.diverged);
  ASSERT_TRUE(r.record.abort_iteration.has_value());
  EXPECT_FALSE(r.record.abort_reason.empty());
}

TEST(Training, FinetuneFullFractionEqualsTrainFromInit) {
  kernels::set_num_threads(1);
  auto src_data = gen_dataset(3, 8, domain_preset("domA"), 5);
  auto tgt = gen_dataset(3, 8, domain_preset("domB"), 6);
  auto net_cfg = small_net(BlockVariant::IBN_a, 3);
  auto src = train(quick(1), net_cfg, src_data).net;
  auto ft = finetune(src, quick(1), tgt);
  auto tr = train(quick(1), net_cfg, tgt, &src);
  kernels::set_num_threads(0);
  EXPECT_EQ(encode_checkpoint(ft.net), encode_checkpoint(tr.net));
  auto other = small_net(BlockVariant::Baseline, 3);
  EXPECT_THROW(train(quick(1), other, tgt, &src), std::invalid_argument);
}

TEST(Persist, CheckpointRoundTrip) {
  testutil::TempDir dir;
  auto cfg = NetworkConfig::desk(BlockVariant::IBN_b);
  auto net = build_network<float>(cfg, 9);
  save_model(net, TrainConfig{}, dir.file("m.ibnw"));
  auto back = load_model(dir.file("m.ibnw"));
  EXPECT_EQ(back.config, cfg);
  save_checkpoint(back, dir.file("again.ibnw"));
  EXPECT_EQ(testutil::read_bytes(dir.file("m.ibnw")), testutil::read_bytes(dir.file("again.ibnw")));
  const auto bytes = testutil::read_bytes(dir.file("m.ibnw"));
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.data(), 4), "IBNW");
}

TEST(Persist, CheckpointErrors) {
  testutil::TempDir dir;
  EXPECT_THROW(read_checkpoint(dir.file("missing.ibnw")), IoError);
  auto net = build_network<float>(NetworkConfig::desk(BlockVariant::Baseline), 1);
  auto bytes = encode_checkpoint(net);
  auto write = [&](const std::string& name, const std::vector<char>& b) {
    std::ofstream(dir.file(name), std::ios::binary).write(b.data(), std::streamsize(b.size()));
    return dir.file(name);
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(read_checkpoint(write("magic.ibnw", bad_magic)), SchemaError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(read_checkpoint(write("ver.ibnw", bad_version)), SchemaError);
  auto trunc = std::vector<char>(bytes.begin(), bytes.begin() + std::ptrdiff_t(bytes.size() / 2));
  EXPECT_ANY_THROW(read_checkpoint(write("trunc.ibnw", trunc)));

  // tensors from another architecture do not fit
  auto other = build_network<float>(NetworkConfig::desk(BlockVariant::IBN_a), 1);
  EXPECT_THROW(apply_checkpoint(other, read_checkpoint(write("ok.ibnw", bytes))), SchemaError);
  auto tensors = read_checkpoint(dir.file("ok.ibnw"));
  tensors.pop_back();
  EXPECT_THROW(apply_checkpoint(net, tensors), SchemaError);
}

TEST(Persist, ConfigJson) {
  NetworkConfig n = NetworkConfig::desk(BlockVariant::IBN_b);
  n.in_ratio = 0.25;
  TrainConfig t;
  t.lr_policy.kind = LrPolicy::Kind::Poly;
  t.seed = 42;
  auto rc = parse_run_config(run_config_json(n, t));
  EXPECT_EQ(rc.network, n);
  EXPECT_EQ(rc.train, t);
  EXPECT_EQ(parse_network_config(network_config_json(n)), n);
  EXPECT_EQ(parse_train_config(train_config_json(t)), t);

  auto j = nlohmann::json::parse(train_config_json(t));
  j["learning_rate_typo"] = 1;
  EXPECT_THROW(parse_train_config(j.dump()), SchemaError);
  auto k = nlohmann::json::parse(train_config_json(t));
  k["epochs"] = "thirty";
  EXPECT_THROW(parse_train_config(k.dump()), SchemaError);
  auto v = nlohmann::json::parse(network_config_json(n));
  v["in_ratio"] = 2.0;
  EXPECT_THROW(parse_network_config(v.dump()), SchemaError);
  EXPECT_THROW(parse_run_config("{not json"), SchemaError);
  auto r = nlohmann::json::parse(run_config_json(n, t));
  r["schema_version"] = 7;
  EXPECT_THROW(parse_run_config(r.dump()), SchemaError);
}
