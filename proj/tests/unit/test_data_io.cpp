#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "bubbleformer/checkpoint.hpp"
#include "bubbleformer/data_io.hpp"
#include "bubbleformer/error.hpp"
#include "json.hpp"

using namespace bubbleformer;
namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Trajectory sample_trajectory(std::size_t n = 3, std::size_t h = 4, std::size_t w = 5) {
  Trajectory t;
  t.frames = Tensor<float>({n, 4, h, w});
  std::mt19937 rng(7);
  std::normal_distribution<float> normal;
  for (auto& v : t.frames.data()) v = normal(rng);
  t.frames[0] = -0.0f;
  t.frames[1] = std::numeric_limits<float>::denorm_min();
  t.dx = 1.0 / 32;
  t.dy = 1.0 / 64;
  t.dt = 0.04;
  t.fluid_id = "fc72";
  t.fluid.reynolds = 1234.5;
  t.fluid.wait_time = 0.67;
  t.scenario_json = R"({"scenario":"pool","seed":3})";
  return t;
}

// Reflected CRC-32, polynomial 0xEDB88320, bit by bit.
std::uint32_t crc32_bitwise(const std::uint8_t* p, std::size_t n) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int b = 0; b < 8; ++b) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

std::uint64_t read_le(const std::vector<std::uint8_t>& b, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[at + static_cast<std::size_t>(i)];
  return v;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.raw(), b.raw(), a.size() * sizeof(float)) == 0;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("bf_io_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("trajectory container round trip") {
  const Trajectory t = sample_trajectory();
  TempDir dir;
  const auto file = (dir.path / "a.bmt").string();
  write_trajectory(t, file);
  const Trajectory back = read_trajectory(file);
  CHECK(same_bits(back.frames, t.frames));
  CHECK(back.dx == t.dx);
  CHECK(back.dy == t.dy);
  CHECK(back.dt == t.dt);
  CHECK(back.fluid_id == t.fluid_id);
  CHECK(back.fluid == t.fluid);
  CHECK(nlohmann::json::parse(back.scenario_json) == nlohmann::json::parse(t.scenario_json));

  // Re-encoding the decoded trajectory reproduces the file byte for byte.
  std::ifstream in(file, std::ios::binary);
  const std::vector<std::uint8_t> on_disk((std::istreambuf_iterator<char>(in)), {});
  CHECK(encode_trajectory(back) == on_disk);
}

TEST_CASE("trajectory container layout") {
  const Trajectory t = sample_trajectory();
  const auto bytes = encode_trajectory(t);
  REQUIRE(bytes.size() > 16);
  CHECK(std::memcmp(bytes.data(), "BMT1", 4) == 0);
  CHECK(read_le(bytes, 4, 4) == kTrajectoryFormatVersion);
  const std::size_t header_len = read_le(bytes, 8, 8);
  const std::string header(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(header_len));
  const auto h = nlohmann::json::parse(header);
  CHECK(h["shape"] == nlohmann::json::array({3, 4, 4, 5}));
  CHECK(h["dtype"] == "float32");
  CHECK(h["fluid_id"] == "fc72");
  CHECK(h["descriptor"]["reynolds"] == 1234.5);

  const std::size_t payload = 16 + header_len;
  CHECK(bytes.size() == payload + t.frames.size() * 4 + 4);
  for (std::size_t i = 0; i < t.frames.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &t.frames[i], 4);
    REQUIRE(read_le(bytes, payload + i * 4, 4) == bits);
  }
  CHECK(read_le(bytes, bytes.size() - 4, 4) == crc32_bitwise(bytes.data(), bytes.size() - 4));

  const auto meta = nlohmann::json::parse(trajectory_metadata_json(t));
  CHECK(meta["shape"] == h["shape"]);
  CHECK(meta["scenario"]["seed"] == 3);
}

TEST_CASE("trajectory container rejects damaged input") {
  const auto good = encode_trajectory(sample_trajectory());

  auto corrupt = good;
  corrupt[good.size() / 2] ^= 0x10;
  CHECK_THROWS_WITH_AS(decode_trajectory(corrupt), doctest::Contains("checksum"), DataError);

  auto footer = good;
  footer.back() ^= 0x01;
  CHECK_THROWS_AS(decode_trajectory(footer), DataError);

  auto truncated = good;
  truncated.resize(good.size() - 9);
  CHECK_THROWS_AS(decode_trajectory(truncated), DataError);
  CHECK_THROWS_AS(decode_trajectory({}), DataError);
  CHECK_THROWS_AS(decode_trajectory(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)), DataError);

  auto magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_trajectory(magic), DataError);

  auto version = good;
  version[4] = 2;
  CHECK_THROWS_WITH_AS(decode_trajectory(version), doctest::Contains("version"), DataError);

  CHECK_THROWS_AS(read_trajectory("/nonexistent/dir/x.bmt"), DataError);

  Trajectory empty = sample_trajectory();
  empty.frames = Tensor<float>();
  CHECK_THROWS_AS(encode_trajectory(empty), DataError);
  Trajectory nan = sample_trajectory();
  nan.frames[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(encode_trajectory(nan), DataError);
  Trajectory bad_meta = sample_trajectory();
  bad_meta.scenario_json = "{oops";
  CHECK_THROWS_AS(encode_trajectory(bad_meta), DataError);
}

TEST_CASE("frame ranges") {
  const Trajectory t = sample_trajectory(5, 2, 3);
  const auto r = t.frame_range(2, 2);
  CHECK(r.shape() == Shape{2, 4, 2, 3});
  CHECK(r[0] == t.frames[2 * 24]);
  CHECK(r[47] == t.frames[3 * 24 + 23]);
  CHECK_THROWS_AS(t.frame_range(4, 2), DataError);
  CHECK_THROWS_AS(t.frame_range(0, 0), DataError);
}

TEST_CASE("regrid on the identity grid") {
  Tensor<double> clean({4, 5});
  for (std::size_t i = 0; i < clean.size(); ++i) clean[i] = std::sin(double(i));
  CHECK(regrid_with_nan_fill(clean) == clean);

  Tensor<double> corner = clean;
  corner.at({0, 0}) = kNaN;
  auto filled = regrid_with_nan_fill(corner);
  CHECK(filled.all_finite());
  // No finite cell on the far side of the row or column: nearest neighbour,
  // (0, 1) and (1, 0) tie and row-major order picks (0, 1).
  CHECK(filled.at({0, 0}) == clean.at({0, 1}));
  for (std::size_t i = 1; i < clean.size(); ++i) CHECK(filled[i] == clean[i]);

  // A lone finite cell has nothing to interpolate with: everything copies it.
  Tensor<double> lone({3, 3}, kNaN);
  lone.at({1, 2}) = 4.0;
  const auto spread = regrid_with_nan_fill(lone);
  for (double v : spread.data()) CHECK(v == 4.0);

  // Nearest-neighbour ties go to the first cell in row-major order.
  Tensor<double> tie({3, 3}, kNaN);
  tie.at({0, 1}) = 1.0;
  tie.at({1, 0}) = 2.0;
  const auto t = regrid_with_nan_fill(tie);
  CHECK(t.all_finite());
  CHECK(t.at({2, 2}) == 1.0);

  CHECK_THROWS_AS(regrid_with_nan_fill(Tensor<double>({3, 3}, kNaN)), DataError);
  CHECK_THROWS_AS(regrid_with_nan_fill(Tensor<double>({3})), ShapeError);
}

TEST_CASE("regrid reproduces linear fields") {
  const std::size_t ny = 24, nx = 32;
  UniformGrid src{nx, ny, 0.1, -0.2, 0.05, 0.04};
  auto f = [](double x, double y) { return 2 * x + 3 * y; };
  Tensor<double> field({ny, nx});
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) field.at({j, i}) = f(src.x0 + i * src.dx, src.y0 + j * src.dy);

  std::mt19937_64 rng(3);
  // Holes stay clear of the outer source cells so every target hole has finite
  // target nodes on both sides of its row and column.
  std::uniform_int_distribution<std::size_t> ri(2, ny - 4), ci(2, nx - 4);
  Tensor<double> holes = field;
  for (int n = 0; n < 60; ++n) holes.at({ri(rng), ci(rng)}) = kNaN;
  // An edge hole still has finite cells on both sides along its row.
  holes.at({ny - 1, 7}) = kNaN;

  auto same_grid = regrid_with_nan_fill(holes, src, src);
  for (std::size_t i = 0; i < field.size(); ++i) REQUIRE(std::abs(same_grid[i] - field[i]) < 1e-10);

  // Resample onto an offset, finer grid inside the source hull.
  UniformGrid dst{50, 40, 0.13, -0.17, 0.03, 0.022};
  auto fine = regrid_with_nan_fill(holes, src, dst);
  CHECK(fine.shape() == Shape{40, 50});
  for (std::size_t j = 0; j < dst.ny; ++j)
    for (std::size_t i = 0; i < dst.nx; ++i)
      REQUIRE(std::abs(fine.at({j, i}) - f(dst.x0 + i * dst.dx, dst.y0 + j * dst.dy)) < 1e-10);

  // Already clean output: regridding again changes nothing.
  CHECK(regrid_with_nan_fill(fine, dst, dst) == fine);
}

TEST_CASE("teacher forcing windows") {
  CHECK(window_samples(2000, 5).size() == 1991u);
  const auto one = window_samples(10, 5);
  REQUIRE(one.size() == 1u);
  CHECK(one[0].input_start == 0u);
  CHECK(one[0].target_start == 5u);
  CHECK_THROWS_AS(window_samples(9, 5), DataError);
  CHECK_THROWS_AS(window_samples(9, 0), DataError);

  for (std::size_t n = 6; n < 40; ++n) {
    for (std::size_t k = 1; 2 * k <= n; ++k) {
      const auto w = window_samples(n, k);
      REQUIRE(w.size() == n - 2 * k + 1);
      std::vector<int> seen(n, 0);
      for (const auto& p : w) {
        REQUIRE(p.target_start == p.input_start + k);
        for (std::size_t i = 0; i < 2 * k; ++i) seen[p.input_start + i] = 1;
      }
      for (int s : seen) REQUIRE(s == 1);
    }
  }
  CHECK(window_samples(sample_trajectory(12), 3).size() == 7u);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.mlp_dim = 32;
  cfg.num_heads = 2;
  cfg.num_blocks = 1;
  cfg.patch_size = 2;
  cfg.window = 3;
  Checkpoint ck;
  ck.config = cfg;
  ck.seed = 42;
  ck.step = 17;
  ck.epoch = 2;
  ck.train_config_json = R"({"base_lr":0.001})";
  std::mt19937 rng(1);
  std::normal_distribution<float> normal;
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    Tensor<float> v(shape);
    for (auto& x : v.data()) x = normal(rng);
    ck.momentum.push_back(v);
    ck.parameters.add(name, std::move(v));
  }
  TempDir dir;
  const auto file = (dir.path / "m.bfck").string();
  write_checkpoint(ck, file);
  const Checkpoint back = read_checkpoint(file);
  CHECK(back.config == cfg);
  CHECK(back.seed == 42u);
  CHECK(back.step == 17u);
  CHECK(back.epoch == 2u);
  CHECK(nlohmann::json::parse(back.train_config_json)["base_lr"] == 0.001);
  REQUIRE(back.parameters.size() == ck.parameters.size());
  for (std::size_t i = 0; i < ck.parameters.size(); ++i) {
    CHECK(back.parameters.entries()[i].name == ck.parameters.entries()[i].name);
    CHECK(same_bits(back.parameters.entries()[i].value, ck.parameters.entries()[i].value));
    CHECK(same_bits(back.momentum[i], ck.momentum[i]));
  }

  const auto bytes = encode_checkpoint(ck);
  CHECK(std::memcmp(bytes.data(), "BFCK", 4) == 0);
  CHECK(read_le(bytes, bytes.size() - 4, 4) == crc32_bitwise(bytes.data(), bytes.size() - 4));
  auto corrupt = bytes;
  corrupt[bytes.size() - 40] ^= 0x01;
  CHECK_THROWS_AS(decode_checkpoint(corrupt), DataError);
  CHECK_THROWS_AS(read_checkpoint((dir.path / "missing.bfck").string()), DataError);

  Checkpoint bare = ck;
  bare.momentum.clear();
  CHECK(decode_checkpoint(encode_checkpoint(bare)).momentum.empty());
  bare.momentum.push_back(Tensor<float>({1}));
  CHECK_THROWS_AS(encode_checkpoint(bare), ShapeError);
}
