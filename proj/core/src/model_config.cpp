#include "bubbleformer/model_config.hpp"

#include <bit>

#include "bubbleformer/error.hpp"
#include "json.hpp"

namespace bubbleformer {

ModelConfig ModelConfig::small() { return ModelConfig{}; }

ModelConfig ModelConfig::large() {
  ModelConfig c;
  c.embed_dim = 768;
  c.mlp_dim = 3072;
  c.num_heads = 12;
  return c;
}

void ModelConfig::validate() const {
  if (embed_dim == 0) throw ConfigError("embed_dim", "must be positive");
  if (mlp_dim == 0) throw ConfigError("mlp_dim", "must be positive");
  if (num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("num_heads", "embed_dim must be divisible by num_heads");
  }
  if (num_blocks == 0) throw ConfigError("num_blocks", "must be positive");
  if (patch_size != 2 && patch_size != 4 && patch_size != 8 && patch_size != 16) {
    throw ConfigError("patch_size", "must be one of 2, 4, 8, 16");
  }
  if (window == 0) throw ConfigError("window", "must be positive");
  if (in_channels != 4) throw ConfigError("in_channels", "must be 4");
  if (out_channels != 4) throw ConfigError("out_channels", "must be 4");
  if (film_dim != 9) throw ConfigError("film_dim", "must be 9");
  if (rel_buckets < 4 || rel_buckets % 2 != 0) throw ConfigError("rel_buckets", "must be an even number >= 4");
  if (rel_max_distance <= rel_buckets / 4) throw ConfigError("rel_max_distance", "too small for the bucket count");
}

std::size_t ModelConfig::stages() const {
  return static_cast<std::size_t>(std::countr_zero(patch_size));
}

std::vector<std::size_t> ModelConfig::stem_widths() const {
  const std::size_t n = stages();
  const std::size_t floor_width = std::min<std::size_t>(16, embed_dim);
  std::vector<std::size_t> w(n);
  for (std::size_t s = 0; s < n; ++s) w[s] = std::max(floor_width, embed_dim >> (n - 1 - s));
  return w;
}

std::string model_config_to_json(const ModelConfig& c) {
  nlohmann::json j = {{"embed_dim", c.embed_dim},     {"mlp_dim", c.mlp_dim},
                      {"num_heads", c.num_heads},     {"num_blocks", c.num_blocks},
                      {"patch_size", c.patch_size},   {"window", c.window},
                      {"in_channels", c.in_channels}, {"out_channels", c.out_channels},
                      {"film_dim", c.film_dim},       {"rel_buckets", c.rel_buckets},
                      {"rel_max_distance", c.rel_max_distance}};
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("model", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model", "expected an object");
  ModelConfig c;
  if (j.contains("preset")) {
    const auto preset = j["preset"].get<std::string>();
    if (preset == "small") c = ModelConfig::small();
    else if (preset == "large") c = ModelConfig::large();
    else throw ConfigError("preset", "unknown preset '" + preset + "'");
  }
  auto read = [&j](const char* key, std::size_t& dst) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError(key, "expected a non-negative integer");
    }
    dst = v.get<std::size_t>();
  };
  read("embed_dim", c.embed_dim);
  read("mlp_dim", c.mlp_dim);
  read("num_heads", c.num_heads);
  read("num_blocks", c.num_blocks);
  read("patch_size", c.patch_size);
  read("window", c.window);
  read("in_channels", c.in_channels);
  read("out_channels", c.out_channels);
  read("film_dim", c.film_dim);
  read("rel_buckets", c.rel_buckets);
  read("rel_max_distance", c.rel_max_distance);
  c.validate();
  return c;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> layout;
  const std::size_t e = cfg.embed_dim;
  const auto widths = cfg.stem_widths();
  const std::size_t n = widths.size();

  for (std::size_t s = 0; s < n; ++s) {
    const std::string p = "embed." + std::to_string(s);
    const std::size_t cin = s == 0 ? cfg.in_channels : widths[s - 1];
    layout.push_back({p + ".conv", {widths[s], cin, 2, 2}});
    layout.push_back({p + ".bias", {widths[s]}});
    layout.push_back({p + ".norm.gain", {widths[s]}});
    layout.push_back({p + ".norm.bias", {widths[s]}});
  }

  layout.push_back({"film.fc1.weight", {cfg.film_dim, e}});
  layout.push_back({"film.fc1.bias", {e}});
  layout.push_back({"film.fc2.weight", {e, 2 * e}});
  layout.push_back({"film.fc2.bias", {2 * e}});

  const std::size_t h = cfg.num_heads, nb = cfg.rel_buckets;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    auto norm = [&](const std::string& name) {
      layout.push_back({p + "." + name + ".gain", {e}});
      layout.push_back({p + "." + name + ".bias", {e}});
    };
    auto attention = [&](const std::string& name) {
      layout.push_back({p + "." + name + ".qkv.weight", {e, 3 * e}});
      layout.push_back({p + "." + name + ".qkv.bias", {3 * e}});
      layout.push_back({p + "." + name + ".proj.weight", {e, e}});
      layout.push_back({p + "." + name + ".proj.bias", {e}});
    };
    auto axis = [&](const std::string& name) {
      layout.push_back({p + ".rel_bias_" + name, {nb, h}});
      layout.push_back({p + ".omega_" + name + ".low", {1}});
      layout.push_back({p + ".omega_" + name + ".high", {1}});
    };
    norm("norm_t");
    attention("attn_t");
    axis("t");
    norm("norm_h");
    norm("norm_w");
    // Height and width attention share one projection set.
    attention("attn_s");
    axis("h");
    axis("w");
    norm("norm_mlp");
    layout.push_back({p + ".mlp.fc1.weight", {e, cfg.mlp_dim}});
    layout.push_back({p + ".mlp.fc1.bias", {cfg.mlp_dim}});
    layout.push_back({p + ".mlp.fc2.weight", {cfg.mlp_dim, e}});
    layout.push_back({p + ".mlp.fc2.bias", {e}});
    layout.push_back({p + ".theta.low", {1}});
    layout.push_back({p + ".theta.high", {1}});
  }

  for (std::size_t r = 0; r < n; ++r) {
    const std::string p = "reconstruct." + std::to_string(r);
    const std::size_t cin = widths[n - 1 - r];
    const bool last = r + 1 == n;
    const std::size_t cout = last ? cfg.out_channels : widths[n - 2 - r];
    layout.push_back({p + ".conv", {cin, cout, 2, 2}});
    layout.push_back({p + ".bias", {cout}});
    if (!last) {
      layout.push_back({p + ".norm.gain", {cout}});
      layout.push_back({p + ".norm.bias", {cout}});
    }
  }
  return layout;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_layout(cfg)) total += shape_volume(shape);
  return total;
}

}  // namespace bubbleformer
