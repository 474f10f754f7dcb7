#pragma once

#include <string>
#include <vector>

#include "ibn/blocks.hpp"
#include "ibn/train.hpp"

namespace ibn {

// IBNW checkpoint: "IBNW", u32 version, u32 count, then per tensor
// u16 name length, name, u8 rank, rank x u32 dims, float32 data (little-endian).
struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<char> encode_checkpoint(const Network<float>& net);
void save_checkpoint(const Network<float>& net, const std::string& path);
std::vector<CheckpointTensor> read_checkpoint(const std::string& path);
// Copies tensors into `net` by name. Missing, extra or misshapen tensors throw SchemaError.
void apply_checkpoint(Network<float>& net, const std::vector<CheckpointTensor>& tensors);

// JSON configs. Parsing throws SchemaError on unknown keys, wrong types or
// values that fail validation.
std::string network_config_json(const NetworkConfig& cfg);
std::string train_config_json(const TrainConfig& cfg);
// {"schema_version":1,"network":{...},"train":{...}}
std::string run_config_json(const NetworkConfig& net, const TrainConfig& train);

NetworkConfig parse_network_config(const std::string& json_text);
TrainConfig parse_train_config(const std::string& json_text);
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
};
RunConfig parse_run_config(const std::string& json_text);

std::string read_text_file(const std::string& path);                       // IoError
void write_text_file(const std::string& path, const std::string& content);  // IoError

// Checkpoint plus its "<path>.json" run config.
Network<float> load_model(const std::string& ckpt_path);
void save_model(const Network<float>& net, const TrainConfig& cfg, const std::string& ckpt_path);

}  // namespace ibn
