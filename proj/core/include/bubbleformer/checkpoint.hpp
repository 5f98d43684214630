#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bubbleformer/model_config.hpp"
#include "bubbleformer/parameters.hpp"

namespace bubbleformer {

/// "BFCK", u32 version, u64 header length, JSON header (config, seed, step,
/// parameter names/shapes), float32 parameters in registry order, optional
/// float32 Lion momentum in the same order, u32 CRC32 footer. Little-endian.
struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string train_config_json = "{}";
  ParameterStore<float> parameters;
  std::vector<Tensor<float>> momentum;  // empty when not stored
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace bubbleformer
