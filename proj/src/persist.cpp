#include "ibn/persist.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "ibn/binio.hpp"
#include "ibn/errors.hpp"
#include "json.hpp"

namespace ibn {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// checkpoints

namespace {

void write_checkpoint_stream(const Network<float>& net, std::ostream& os) {
  const auto tensors = net.named_tensors();
  os.write("IBNW", 4);
  binio::put_u32(os, kCheckpointVersion);
  binio::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    if (nt.name.size() > 0xffff) throw SchemaError("checkpoint: tensor name too long");
    binio::put_u16(os, static_cast<std::uint16_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    const auto& sh = nt.tensor.shape();
    binio::put_u8(os, static_cast<std::uint8_t>(sh.size()));
    for (auto d : sh) binio::put_u32(os, static_cast<std::uint32_t>(d));
    binio::put_f32s(os, nt.tensor.data().data(), nt.tensor.numel());
  }
}

}  // namespace

std::vector<char> encode_checkpoint(const Network<float>& net) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint_stream(net, os);
  const std::string s = os.str();
  return {s.begin(), s.end()};
}

void save_checkpoint(const Network<float>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_checkpoint_stream(net, os);
  os.flush();
  if (!os) throw IoError("write to '" + path + "' failed");
}

std::vector<CheckpointTensor> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  binio::Reader r(is, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "IBNW") throw SchemaError(path + ": not an IBNW checkpoint");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw SchemaError(path + ": unsupported checkpoint version " + std::to_string(v));
  const std::uint32_t count = r.u32();
  std::vector<CheckpointTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name.resize(r.u16());
    r.bytes(t.name.data(), t.name.size());
    t.shape.resize(r.u8());
    double n = 1;
    for (auto& d : t.shape) {
      d = r.u32();
      n *= static_cast<double>(d);
    }
    if (n > 1e9) throw SchemaError(path + ": implausible tensor size for '" + t.name + "'");
    t.data.resize(shape_numel(t.shape));
    r.f32s(t.data.data(), t.data.size());
    out.push_back(std::move(t));
  }
  if (!r.at_end()) throw SchemaError(path + ": trailing bytes after last tensor");
  return out;
}

void apply_checkpoint(Network<float>& net, const std::vector<CheckpointTensor>& tensors) {
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : tensors)
    if (!by_name.emplace(t.name, &t).second) throw SchemaError("checkpoint: duplicate tensor '" + t.name + "'");
  auto targets = net.named_tensors();
  for (const auto& nt : targets) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw SchemaError("checkpoint: missing tensor '" + nt.name + "'");
    if (it->second->shape != nt.tensor.shape()) {
      throw SchemaError("checkpoint: tensor '" + nt.name + "' has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(nt.tensor.shape()));
    }
  }
  if (by_name.size() != targets.size()) throw SchemaError("checkpoint: contains tensors the model does not have");
  for (auto& nt : targets) {
    const auto& src = by_name.at(nt.name)->data;
    std::copy(src.begin(), src.end(), nt.tensor.data().begin());
  }
}

// ---------------------------------------------------------------------------
// JSON configs

namespace {

json net_to_json(const NetworkConfig& c) {
  json j;
  j["variant"] = variant_name(c.variant);
  auto& g = j["groups"] = json::array();
  for (const auto& s : c.groups) g.push_back({{"blocks", s.blocks}, {"channels", s.channels}, {"stride", s.stride}});
  j["in_groups"] = std::vector<std::size_t>(c.in_groups.begin(), c.in_groups.end());
  j["in_ratio"] = c.in_ratio;
  j["num_classes"] = c.num_classes;
  j["stem_channels"] = c.stem_channels;
  j["in_channels"] = c.in_channels;
  return j;
}

json train_to_json(const TrainConfig& c) {
  json j;
  j["base_lr"] = c.base_lr;
  json p;
  if (c.lr_policy.kind == LrPolicy::Kind::Step) {
    p["kind"] = "step";
    p["milestones"] = c.lr_policy.milestones;
    p["factor"] = c.lr_policy.factor;
  } else {
    p["kind"] = "poly";
    p["power"] = c.lr_policy.power;
  }
  j["lr_policy"] = p;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["data_fraction"] = c.data_fraction;
  return j;
}

// Reads typed fields and rejects anything unexpected.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw SchemaError(where_ + ": expected an object");
  }
  template <class V>
  void get(const char* key, V& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    try {
      const auto& v = j_.at(key);
      if constexpr (std::is_unsigned_v<V>) {
        if (!v.is_number_unsigned()) throw SchemaError("");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw SchemaError("");
      }
      out = v.template get<V>();
    } catch (const std::exception&) {
      throw SchemaError(where_ + ": field '" + key + "' has the wrong type");
    }
  }
  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) {
    seen_.push_back(key);
    return j_.at(key);
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw SchemaError(where_ + ": unknown field '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

json parse_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("invalid JSON: ") + e.what());
  }
}

NetworkConfig net_from_json(const json& j) {
  Fields f(j, "network config");
  std::string variant = "baseline";
  f.get("variant", variant);
  NetworkConfig c;
  try {
    c = NetworkConfig::desk(parse_variant(variant));
  } catch (const std::invalid_argument& e) {
    throw SchemaError(e.what());
  }
  if (f.has("groups")) {
    const auto& g = f.raw("groups");
    if (!g.is_array()) throw SchemaError("network config: 'groups' must be an array");
    c.groups.clear();
    for (const auto& e : g) {
      Fields gf(e, "network config group");
      GroupSpec s;
      gf.get("blocks", s.blocks);
      gf.get("channels", s.channels);
      gf.get("stride", s.stride);
      gf.finish();
      c.groups.push_back(s);
    }
  }
  std::vector<std::size_t> in_groups(c.in_groups.begin(), c.in_groups.end());
  f.get("in_groups", in_groups);
  c.in_groups = std::set<std::size_t>(in_groups.begin(), in_groups.end());
  f.get("in_ratio", c.in_ratio);
  f.get("num_classes", c.num_classes);
  f.get("stem_channels", c.stem_channels);
  f.get("in_channels", c.in_channels);
  f.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw SchemaError(e.what());
  }
  return c;
}

TrainConfig train_from_json(const json& j) {
  Fields f(j, "train config");
  TrainConfig c;
  f.get("base_lr", c.base_lr);
  if (f.has("lr_policy")) {
    Fields p(f.raw("lr_policy"), "lr_policy");
    std::string kind = "step";
    p.get("kind", kind);
    if (kind == "step") {
      c.lr_policy.kind = LrPolicy::Kind::Step;
    } else if (kind == "poly") {
      c.lr_policy.kind = LrPolicy::Kind::Poly;
    } else {
      throw SchemaError("lr_policy: kind must be 'step' or 'poly'");
    }
    p.get("milestones", c.lr_policy.milestones);
    p.get("factor", c.lr_policy.factor);
    p.get("power", c.lr_policy.power);
    p.finish();
  }
  f.get("momentum", c.momentum);
  f.get("weight_decay", c.weight_decay);
  f.get("epochs", c.epochs);
  f.get("batch_size", c.batch_size);
  f.get("seed", c.seed);
  f.get("data_fraction", c.data_fraction);
  f.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw SchemaError(e.what());
  }
  return c;
}

}  // namespace

std::string network_config_json(const NetworkConfig& cfg) { return net_to_json(cfg).dump(2) + "\n"; }
std::string train_config_json(const TrainConfig& cfg) { return train_to_json(cfg).dump(2) + "\n"; }

std::string run_config_json(const NetworkConfig& net, const TrainConfig& train) {
  json j;
  j["schema_version"] = 1;
  j["network"] = net_to_json(net);
  j["train"] = train_to_json(train);
  return j.dump(2) + "\n";
}

NetworkConfig parse_network_config(const std::string& text) { return net_from_json(parse_text(text)); }
TrainConfig parse_train_config(const std::string& text) { return train_from_json(parse_text(text)); }

RunConfig parse_run_config(const std::string& text) {
  const json j = parse_text(text);
  Fields f(j, "run config");
  int version = 0;
  f.get("schema_version", version);
  if (version != 1) throw SchemaError("run config: schema_version must be 1");
  RunConfig rc;
  if (f.has("network")) rc.network = net_from_json(f.raw("network"));
  if (f.has("train")) rc.train = train_from_json(f.raw("train"));
  f.finish();
  return rc;
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  if (is.bad()) throw IoError("read from '" + path + "' failed");
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << content;
  os.flush();
  if (!os) throw IoError("write to '" + path + "' failed");
}

Network<float> load_model(const std::string& ckpt_path) {
  const RunConfig rc = parse_run_config(read_text_file(ckpt_path + ".json"));
  auto net = build_network<float>(rc.network, 0);
  apply_checkpoint(net, read_checkpoint(ckpt_path));
  net.set_mode(Mode::Eval);
  return net;
}

void save_model(const Network<float>& net, const TrainConfig& cfg, const std::string& ckpt_path) {
  save_checkpoint(net, ckpt_path);
  write_text_file(ckpt_path + ".json", run_config_json(net.config, cfg));
}

}  // namespace ibn
