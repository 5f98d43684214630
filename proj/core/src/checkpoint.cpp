#include "bubbleformer/checkpoint.hpp"

#include "binary.hpp"
#include "json.hpp"

namespace bubbleformer {

using nlohmann::json;

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  const bool with_momentum = !c.momentum.empty();
  if (with_momentum && c.momentum.size() != c.parameters.size()) {
    throw ShapeError("checkpoint: momentum count does not match parameter count");
  }
  json params = json::array();
  for (std::size_t i = 0; i < c.parameters.size(); ++i) {
    const auto& e = c.parameters.entries()[i];
    if (with_momentum && c.momentum[i].shape() != e.value.shape()) {
      throw ShapeError("checkpoint: momentum shape mismatch for '" + e.name + "'");
    }
    params.push_back({{"name", e.name}, {"shape", e.value.shape()}});
  }
  const json header = {{"format", "BFCK"},
                       {"version", kCheckpointVersion},
                       {"config", json::parse(model_config_to_json(c.config))},
                       {"seed", c.seed},
                       {"step", c.step},
                       {"epoch", c.epoch},
                       {"train_config", json::parse(c.train_config_json)},
                       {"dtype", "float32"},
                       {"parameters", params},
                       {"has_momentum", with_momentum}};
  const std::string text = header.dump();
  detail::ByteWriter w;
  w.bytes("BFCK", 4);
  w.u32(kCheckpointVersion);
  w.u64(text.size());
  w.bytes(text.data(), text.size());
  for (const auto& e : c.parameters.entries()) w.f32(e.value.raw(), e.value.size());
  for (const auto& m : c.momentum) w.f32(m.raw(), m.size());
  w.crc_footer();
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (std::memcmp(r.take(4), "BFCK", 4) != 0) throw DataError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t len = r.u64();
  r.need(len);
  r.check_crc_footer();
  const auto* hp = reinterpret_cast<const char*>(r.take(len));
  Checkpoint c;
  std::vector<std::pair<std::string, Shape>> layout;
  bool with_momentum = false;
  try {
    const json h = json::parse(hp, hp + len);
    c.config = model_config_from_json(h.at("config").dump());
    c.seed = h.at("seed").get<std::uint64_t>();
    c.step = h.at("step").get<std::size_t>();
    c.epoch = h.value("epoch", std::size_t{0});
    c.train_config_json = h.value("train_config", json::object()).dump();
    with_momentum = h.at("has_momentum").get<bool>();
    for (const auto& p : h.at("parameters")) {
      layout.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<Shape>());
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  std::size_t total = 0;
  for (const auto& [name, shape] : layout) total += shape_volume(shape);
  const std::size_t expected = (with_momentum ? 2 : 1) * total * 4 + 4;
  if (r.remaining() != expected) throw DataError("checkpoint: payload size does not match header");
  for (const auto& [name, shape] : layout) {
    Tensor<float> t(shape);
    r.f32(t.raw(), t.size());
    c.parameters.add(name, std::move(t));
  }
  if (with_momentum) {
    for (const auto& [name, shape] : layout) {
      Tensor<float> t(shape);
      r.f32(t.raw(), t.size());
      c.momentum.push_back(std::move(t));
    }
  }
  return c;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  detail::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace bubbleformer
