// ibnkit command-line harness.
//
// Exit codes: 0 ok, 2 usage, 3 I/O, 4 schema/format, 5 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ibn/dataset.hpp"
#include "ibn/divergence.hpp"
#include "ibn/errors.hpp"
#include "ibn/kernels.hpp"
#include "ibn/persist.hpp"
#include "ibn/train.hpp"
#include "json.hpp"

using namespace ibn;
using json = nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kUsage = 2, kIo = 3, kSchema = 4, kNumeric = 5 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::set<std::size_t> parse_group_set(const std::string& s) {
  std::set<std::size_t> out;
  if (s.empty() || s == "none") return out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
      out.insert(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("bad group index '" + tok + "' in '" + s + "'");
    }
  }
  return out;
}

std::string group_set_str(const std::set<std::size_t>& g) {
  std::string s;
  for (auto v : g) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s.empty() ? "none" : s;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void print_progress(const EpochRecord& e) {
  std::fprintf(stderr, "epoch %zu  lr %.5g  loss %.4f  train_top1_err %.2f\n", e.epoch + 1, e.lr, e.train_loss,
               e.train_top1_err);
}

json metrics_json(const Metrics& m) {
  return {{"top1_err", m.top1_err}, {"top5_err", m.top5_err}, {"loss", m.loss}, {"count", m.count}};
}

// Options shared by train, finetune and sweep for the training recipe.
struct RecipeOptions {
  std::optional<double> lr, momentum, weight_decay, fraction;
  std::optional<std::size_t> epochs, batch;
  std::optional<std::uint64_t> seed;
  std::string policy;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "Base learning rate");
    app->add_option("--momentum", momentum, "SGD momentum");
    app->add_option("--weight-decay", weight_decay, "Weight decay");
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--batch", batch, "Batch size (>= 2)");
    app->add_option("--seed", seed, "Seed for initialisation, shuffling and subsets");
    app->add_option("--data-fraction,--fraction", fraction, "Stratified fraction of the training data in (0,1]");
    app->add_option("--policy", policy, "Learning-rate policy: step or poly")->check(CLI::IsMember({"step", "poly"}));
  }
  void apply(TrainConfig& c) const {
    if (lr) c.base_lr = *lr;
    if (momentum) c.momentum = *momentum;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (epochs) c.epochs = *epochs;
    if (batch) c.batch_size = *batch;
    if (seed) c.seed = *seed;
    if (fraction) c.data_fraction = *fraction;
    if (policy == "step") c.lr_policy.kind = LrPolicy::Kind::Step;
    if (policy == "poly") c.lr_policy.kind = LrPolicy::Kind::Poly;
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
};

struct NetOptions {
  std::string variant;
  std::optional<double> ratio;
  std::optional<std::string> groups;

  void add(CLI::App* app) {
    app->add_option("--variant", variant, "baseline, ibn-a, ibn-b, ibn-c, ibn-d, ibn-a&d, ibn-ax2");
    app->add_option("--in-ratio", ratio, "Fraction of IN channels in split norms");
    app->add_option("--in-groups", groups, "Comma-separated IN positions, e.g. 1,2,3 (0 = stem for b/d); 'none'");
  }
  void apply(NetworkConfig& c) const {
    if (!variant.empty()) {
      try {
        c.variant = parse_variant(variant);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      if (!groups) c.in_groups = NetworkConfig::default_in_groups(c.variant);
    }
    if (ratio) c.in_ratio = *ratio;
    if (groups) c.in_groups = parse_group_set(*groups);
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
};

void warn_config(const NetworkConfig& c) {
  for (const auto& w : c.warnings()) std::fprintf(stderr, "warning: %s\n", w.c_str());
}

int finish_run(const TrainResult& r) {
  if (r.record.diverged) {
    std::fprintf(stderr, "error: training diverged at iteration %zu (%s)\n", r.record.abort_iteration.value_or(0),
                 r.record.abort_reason.c_str());
    return kNumeric;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_threads_from_env();

  CLI::App app{"ibnkit: IBN-Net desk-scale toolkit"};
  app.require_subcommand(1, 1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic two-domain dataset file");
  std::string g_preset = "domA", g_out, g_transform;
  std::size_t g_classes = 10, g_per = 200;
  std::uint64_t g_seed = 1;
  std::optional<std::size_t> g_part;
  std::size_t g_parts = 2;
  gen->add_option("--preset", g_preset, "domA, domB or domMonetLike");
  gen->add_option("--classes", g_classes, "Number of classes (>= 2)");
  gen->add_option("--per-class", g_per, "Images per class (>= 1)");
  gen->add_option("--seed", g_seed, "Content seed (shared by content-matched domains)");
  gen->add_option("--transform", g_transform, "Appearance transform applied afterwards, e.g. rgb+50, r+50, std*1.5, monet");
  gen->add_option("--content-part", g_part, "Keep only this class partition (see --parts)");
  gen->add_option("--parts", g_parts, "Number of class partitions for --content-part");
  gen->add_option("--out", g_out, "Output .ibnd path")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a network on a dataset file");
  std::string t_data, t_out, t_config, t_val, t_record;
  RecipeOptions t_recipe;
  NetOptions t_net;
  tr->add_option("--data", t_data, "Training .ibnd")->required();
  tr->add_option("--out", t_out, "Output checkpoint .ibnw (config goes to <out>.json)")->required();
  tr->add_option("--config", t_config, "Run config JSON ({schema_version, network, train}); flags override it");
  tr->add_option("--val", t_val, "Validation .ibnd evaluated after training");
  tr->add_option("--record", t_record, "Run record JSON path (default <out>.record.json)");
  t_recipe.add(tr);
  t_net.add(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one or more dataset files");
  std::string e_ckpt, e_transform, e_json;
  std::vector<std::string> e_data;
  ev->add_option("--ckpt", e_ckpt, "Checkpoint .ibnw (with <ckpt>.json)")->required();
  ev->add_option("--data", e_data, "Dataset .ibnd (repeatable)")->required();
  ev->add_option("--transform", e_transform, "Apply an appearance transform on the fly");
  ev->add_option("--json", e_json, "Also write the report to this path");

  // finetune
  auto* ft = app.add_subcommand("finetune", "Continue training a checkpoint on target-domain data");
  std::string f_ckpt, f_data, f_out, f_val;
  RecipeOptions f_recipe;
  ft->add_option("--ckpt", f_ckpt, "Source checkpoint")->required();
  ft->add_option("--data", f_data, "Target-domain training .ibnd")->required();
  ft->add_option("--out", f_out, "Output checkpoint")->required();
  ft->add_option("--val", f_val, "Target-domain validation .ibnd");
  f_recipe.add(ft);

  // divergence
  auto* dv = app.add_subcommand("divergence", "Per-layer feature divergence between two datasets");
  std::string d_ckpt, d_a, d_b, d_csv, d_json, d_probes;
  double d_mult = 1.0;
  dv->add_option("--ckpt", d_ckpt, "Checkpoint")->required();
  dv->add_option("--a", d_a, "Domain A .ibnd")->required();
  dv->add_option("--b", d_b, "Domain B .ibnd")->required();
  dv->add_option("--probes", d_probes, "Comma-separated probe indices (default: all)");
  dv->add_option("--csv", d_csv, "Write CSV here instead of stdout");
  dv->add_option("--json", d_json, "Also write a JSON report");
  dv->add_option("--display-multiplier", d_mult, "Presentation scale stored in the JSON report");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Grid over IN groups x IN ratio, one CSV row per cell");
  std::string s_data, s_val, s_cross, s_out, s_variant = "ibn-a";
  std::vector<double> s_ratios{0.5};
  std::vector<std::string> s_groups;
  std::vector<std::uint64_t> s_seeds;
  RecipeOptions s_recipe;
  sw->add_option("--data", s_data, "Training .ibnd")->required();
  sw->add_option("--val", s_val, "In-domain validation .ibnd")->required();
  sw->add_option("--cross", s_cross, "Cross-domain validation .ibnd");
  sw->add_option("--variant", s_variant, "Block variant");
  sw->add_option("--ratios", s_ratios, "IN ratios")->delimiter(',');
  sw->add_option("--group-sets", s_groups, "IN group sets separated by ';', e.g. '1;1,2;1,2,3'")->delimiter(';');
  sw->add_option("--seeds", s_seeds, "Seeds (one run per seed per cell)")->delimiter(',');
  sw->add_option("--out", s_out, "CSV output (default stdout)");
  s_recipe.add(sw);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) {
      DatasetBundle b;
      try {
        b = gen_dataset(g_classes, g_per, domain_preset(g_preset), g_seed);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      if (!g_transform.empty()) {
        try {
          b = transform_bundle(b, parse_transform(g_transform));
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        }
      }
      if (g_part) {
        std::vector<DatasetBundle> parts;
        try {
          parts = content_split(b, g_parts);
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        }
        if (*g_part >= parts.size()) throw UsageError("--content-part out of range");
        b = parts[*g_part];
      }
      write_ibnd(b, g_out);
      std::fprintf(stderr, "wrote %zu images (%zu classes) to %s\n", b.size(), b.num_classes, g_out.c_str());
      return kOk;
    }

    if (*tr) {
      RunConfig rc;
      rc.network = NetworkConfig::desk(BlockVariant::Baseline);
      if (!t_config.empty()) rc = parse_run_config(read_text_file(t_config));
      t_net.apply(rc.network);
      t_recipe.apply(rc.train);
      const DatasetBundle data = read_ibnd(t_data);
      rc.network.num_classes = data.num_classes;
      warn_config(rc.network);
      auto r = train(rc.train, rc.network, data, nullptr, print_progress);
      if (int code = finish_run(r)) return code;
      save_model(r.net, rc.train, t_out);
      r.record.checkpoint_path = t_out;
      if (!t_val.empty()) {
        const auto m = evaluate(r.net, read_ibnd(t_val));
        std::fprintf(stderr, "val top1_err %.2f top5_err %.2f\n", m.top1_err, m.top5_err);
      }
      write_text_file(t_record.empty() ? t_out + ".record.json" : t_record, r.record.to_json());
      return kOk;
    }

    if (*ev) {
      auto net = load_model(e_ckpt);
      std::optional<TransformSpec> tf;
      if (!e_transform.empty()) {
        try {
          tf = parse_transform(e_transform);
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        }
      }
      json j;
      j["schema_version"] = 1;
      j["kind"] = "eval_report";
      j["checkpoint"] = e_ckpt;
      if (tf) j["transform"] = transform_name(*tf);
      auto& res = j["results"] = json::array();
      for (const auto& path : e_data) {
        auto m = evaluate(net, read_ibnd(path), tf);
        auto mj = metrics_json(m);
        mj["data"] = path;
        res.push_back(mj);
      }
      const std::string out = j.dump(2) + "\n";
      std::cout << out;
      if (!e_json.empty()) write_text_file(e_json, out);
      return kOk;
    }

    if (*ft) {
      auto src = load_model(f_ckpt);
      const RunConfig rc = parse_run_config(read_text_file(f_ckpt + ".json"));
      TrainConfig cfg = finetune_config(rc.train);
      f_recipe.apply(cfg);
      auto r = finetune(src, cfg, read_ibnd(f_data), print_progress);
      if (int code = finish_run(r)) return code;
      save_model(r.net, cfg, f_out);
      r.record.checkpoint_path = f_out;
      if (!f_val.empty()) {
        const auto m = evaluate(r.net, read_ibnd(f_val));
        std::fprintf(stderr, "target val top1_err %.2f top5_err %.2f\n", m.top1_err, m.top5_err);
      }
      write_text_file(f_out + ".record.json", r.record.to_json());
      return kOk;
    }

    if (*dv) {
      auto net = load_model(d_ckpt);
      std::vector<std::size_t> probes;
      if (!d_probes.empty()) {
        const auto s = parse_group_set(d_probes);
        probes.assign(s.begin(), s.end());
        for (auto p : probes)
          if (p >= net.probe_names().size()) throw UsageError("probe index " + std::to_string(p) + " out of range");
      }
      auto a = read_ibnd(d_a), b = read_ibnd(d_b);
      a.domain_tag = d_a;
      b.domain_tag = d_b;
      auto rep = divergence_report(net, a, b, probes);
      rep.checkpoint_id = d_ckpt;
      rep.display_multiplier = d_mult;
      if (d_csv.empty()) {
        std::cout << rep.to_csv();
      } else {
        write_text_file(d_csv, rep.to_csv());
      }
      if (!d_json.empty()) write_text_file(d_json, rep.to_json());
      return kOk;
    }

    if (*sw) {
      NetworkConfig base;
      try {
        base = NetworkConfig::desk(parse_variant(s_variant));
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      TrainConfig cfg;
      s_recipe.apply(cfg);
      if (s_seeds.empty()) s_seeds.push_back(cfg.seed);
      std::vector<std::set<std::size_t>> sets;
      for (const auto& g : s_groups) sets.push_back(parse_group_set(g));
      if (sets.empty()) sets.push_back(base.in_groups);

      const DatasetBundle data = read_ibnd(s_data), val = read_ibnd(s_val);
      std::optional<DatasetBundle> cross;
      if (!s_cross.empty()) cross = read_ibnd(s_cross);
      base.num_classes = data.num_classes;

      std::string csv = "variant,in_groups,in_ratio,seed,top1_err,top5_err";
      csv += cross ? ",cross_top1_err,cross_top5_err\n" : "\n";
      for (const auto& gs : sets)
        for (double ratio : s_ratios) {
          NetworkConfig nc = base;
          nc.in_groups = gs;
          nc.in_ratio = ratio;
          try {
            nc.validate();
          } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
          }
          for (auto seed : s_seeds) {
            TrainConfig c = cfg;
            c.seed = seed;
            std::fprintf(stderr, "cell groups=%s ratio=%g seed=%llu\n", group_set_str(gs).c_str(), ratio,
                         static_cast<unsigned long long>(seed));
            auto r = train(c, nc, data);
            if (int code = finish_run(r)) return code;
            const auto m = evaluate(r.net, val);
            csv += variant_name(nc.variant) + ",\"" + group_set_str(gs) + "\"," + fmt(ratio) + "," +
                   std::to_string(seed) + "," + fmt(m.top1_err) + "," + fmt(m.top5_err);
            if (cross) {
              const auto mc = evaluate(r.net, *cross);
              csv += "," + fmt(mc.top1_err) + "," + fmt(mc.top5_err);
            }
            csv += "\n";
          }
        }
      if (s_out.empty()) {
        std::cout << csv;
      } else {
        write_text_file(s_out, csv);
        write_text_file(s_out + ".config.json", run_config_json(base, cfg));
      }
      return kOk;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "schema error: %s\n", e.what());
    return kSchema;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "schema error: %s\n", e.what());
    return kSchema;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kUsage;
}
