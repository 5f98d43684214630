#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bubbleformer/tensor.hpp"

namespace bubbleformer {

struct ModelConfig {
  std::size_t embed_dim = 384;
  std::size_t mlp_dim = 1536;
  std::size_t num_heads = 6;
  std::size_t num_blocks = 12;
  std::size_t patch_size = 16;
  std::size_t window = 5;  // frames in and frames out
  std::size_t in_channels = 4;
  std::size_t out_channels = 4;
  std::size_t film_dim = 9;
  std::size_t rel_buckets = 32;
  std::size_t rel_max_distance = 128;

  static ModelConfig small();
  static ModelConfig large();

  /// Throws ConfigError naming the offending field.
  void validate() const;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t stages() const;
  /// Output width of every stem stage; the last equals embed_dim.
  std::vector<std::size_t> stem_widths() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string model_config_to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; `preset` ("small"/"large") may seed them.
ModelConfig model_config_from_json(std::string_view text);

/// Every learnable tensor with its shape, in registry order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg);

std::size_t parameter_count(const ModelConfig& cfg);

}  // namespace bubbleformer
