#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "bubbleformer/checkpoint.hpp"
#include "bubbleformer/data_io.hpp"
#include "bubbleformer/parameters.hpp"
#include "json.hpp"

using namespace bubbleformer;
namespace fs = std::filesystem;

#ifndef BUBBLEBENCH_PATH
#error "BUBBLEBENCH_PATH must name the bubblebench executable"
#endif

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Workspace {
 public:
  Workspace() {
    dir_ = fs::temp_directory_path() / ("bf_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir_);
  }
  ~Workspace() { fs::remove_all(dir_); }

  fs::path operator/(const std::string& name) const { return dir_ / name; }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  Result run(const std::string& args, const std::string& env = "") const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && " + env + " '" + BUBBLEBENCH_PATH + "' " + args + " >'" +
                            out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

 private:
  fs::path dir_;
};

const char* kPool = R"({"scenario": "pool", "height": 32, "width": 32, "frames": 24, "stride": 8, "sites": 1})";
const char* kTiny = R"({
  "model": {"embed_dim": 16, "mlp_dim": 32, "num_heads": 2, "num_blocks": 1, "patch_size": 4, "window": 3},
  "train": {"epochs": 2, "iterations_per_epoch": 5, "batch_size": 2, "warmup_steps": 2,
            "history": 3, "forecast": 3, "seed": 1}})";

}  // namespace

TEST_CASE("usage errors") {
  Workspace ws;
  CHECK(ws.run("").code == 1);
  CHECK(ws.run("bogus").code == 1);
  CHECK(ws.run("generate").code == 1);
  CHECK(ws.run("--help").code == 0);
  CHECK(ws.run("rollout --checkpoint a --init b --steps 0").code == 1);
}

TEST_CASE("generate") {
  Workspace ws;
  ws.write("pool.json", kPool);
  auto r = ws.run("generate --config pool.json --out data --seed 7");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(ws / "data/pool.bmt"));
  const auto meta = nlohmann::json::parse(slurp(ws / "data/pool.json"));
  CHECK(meta["shape"] == nlohmann::json::array({24, 4, 32, 32}));
  CHECK(meta["scenario"]["seed"] == 7);
  const auto first = slurp(ws / "data/pool.bmt");

  REQUIRE(ws.run("generate --config pool.json --out again --seed 7").code == 0);
  CHECK(slurp(ws / "again/pool.bmt") == first);
  REQUIRE(ws.run("generate --config pool.json --out other --seed 8").code == 0);
  CHECK(slurp(ws / "other/pool.bmt") != first);

  SUBCASE("configuration errors are reported before simulating") {
    ws.write("cfl.json", R"({"scenario": "pool", "dt": 0.05})");
    r = ws.run("generate --config cfl.json --out bad");
    CHECK(r.code == 1);
    CHECK(r.err.find("scenario.dt") != std::string::npos);
    CHECK_FALSE(fs::exists(ws / "bad/cfl.bmt"));

    ws.write("typo.json", R"({"scenario": "pool", "hieght": 32})");
    CHECK(ws.run("generate --config typo.json --out bad").code == 1);
    ws.write("broken.json", "{");
    CHECK(ws.run("generate --config broken.json --out bad").code == 1);
    // One bad entry rejects the whole batch.
    ws.write("batch.json", std::string("[") + kPool + R"(, {"scenario": "flow", "dt": 0.01}])");
    r = ws.run("generate --config batch.json --out bad");
    CHECK(r.code == 1);
    CHECK(r.err.find("[1].scenario.dt") != std::string::npos);
    CHECK_FALSE(fs::exists(ws / "bad/batch_0.bmt"));
  }

  SUBCASE("batches are identical for any worker count") {
    ws.write("batch.json", std::string("[") + kPool + "," + kPool + "," + kPool + "]");
    REQUIRE(ws.run("generate --config batch.json --out one --seed 3", "BUBBLEBENCH_THREADS=1").code == 0);
    REQUIRE(ws.run("generate --config batch.json --out three --seed 3", "BUBBLEBENCH_THREADS=3").code == 0);
    for (int i = 0; i < 3; ++i) {
      const std::string name = "batch_" + std::to_string(i) + ".bmt";
      CHECK(slurp(ws / ("one/" + name)) == slurp(ws / ("three/" + name)));
    }
    CHECK(slurp(ws / "one/batch_0.bmt") != slurp(ws / "one/batch_1.bmt"));
  }
}

TEST_CASE("inspect") {
  Workspace ws;
  ws.write("pool.json", kPool);
  REQUIRE(ws.run("generate --config pool.json --out data").code == 0);
  auto r = ws.run("inspect data/pool.bmt");
  REQUIRE(r.code == 0);
  for (const char* key : {"frames    24", "32 x 32", "dt 0.02", "fc72", "phi", "temperature", "velocity_x",
                          "velocity_y", "min", "max"}) {
    CHECK_MESSAGE(r.out.find(key) != std::string::npos, key);
  }
  CHECK(r.out.find("eikonal") == std::string::npos);

  r = ws.run("inspect data/pool.bmt --eikonal");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("frame  eikonal") != std::string::npos);
  CHECK(r.out.find("\n   23  ") != std::string::npos);

  CHECK(ws.run("inspect missing.bmt").code == 2);
  ws.write("junk.bmt", "not a trajectory");
  CHECK(ws.run("inspect junk.bmt").code == 2);
}

TEST_CASE("train, resume, rollout and evaluate") {
  Workspace ws;
  ws.write("pool.json", kPool);
  ws.write("tiny.json", kTiny);
  REQUIRE(ws.run("generate --config pool.json --out data").code == 0);

  SUBCASE("dry run checks shapes only") {
    auto r = ws.run("train --data data --config tiny.json --out m.bfck --dry-run");
    CHECK(r.code == 0);
    CHECK(r.out.find("[3, 4, 32, 32]") != std::string::npos);
    CHECK_FALSE(fs::exists(ws / "m.bfck"));

    ws.write("patch.json", R"({"model": {"embed_dim": 16, "mlp_dim": 32, "num_heads": 2, "num_blocks": 1,
                                        "patch_size": 16, "window": 3},
                              "train": {"history": 3, "forecast": 3}})");
    ws.write("wide.json", R"({"scenario": "pool", "height": 32, "width": 40, "frames": 8, "stride": 4})");
    REQUIRE(ws.run("generate --config wide.json --out wide").code == 0);
    CHECK(ws.run("train --data wide --config patch.json --dry-run").code == 2);
    CHECK(ws.run("train --data nowhere --config tiny.json").code == 2);
    ws.write("mismatch.json", R"({"model": {"window": 4}, "train": {"history": 3, "forecast": 3}})");
    CHECK(ws.run("train --data data --config mismatch.json --dry-run").code == 1);
  }

  SUBCASE("training is deterministic and resumable") {
    REQUIRE(ws.run("train --data data --config tiny.json --out a.bfck").code == 0);
    REQUIRE(ws.run("train --data data --config tiny.json --out b.bfck").code == 0);
    CHECK(slurp(ws / "a.bfck") == slurp(ws / "b.bfck"));
    CHECK(slurp(ws / "a.bfck.log.csv") == slurp(ws / "b.bfck.log.csv"));
    const auto a = read_checkpoint((ws / "a.bfck").string());
    CHECK(a.step == 10u);
    CHECK(a.epoch == 2u);
    CHECK(a.momentum.size() == a.parameters.size());

    ws.write("longer.json", R"({"train": {"epochs": 3, "iterations_per_epoch": 5, "batch_size": 2,
                                          "warmup_steps": 2, "history": 3, "forecast": 3, "seed": 1}})");
    auto r = ws.run("train --data data --config longer.json --resume a.bfck --out a.bfck");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("epoch 3 step 15") != std::string::npos);
    CHECK(read_checkpoint((ws / "a.bfck").string()).step == 15u);
    const auto log = slurp(ws / "a.bfck.log.csv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 16);
    CHECK(log.find("\n15,") != std::string::npos);

    // Nothing left to do once the schedule is complete.
    r = ws.run("train --data data --config longer.json --resume a.bfck --out a.bfck");
    CHECK(r.code == 0);
    CHECK(read_checkpoint((ws / "a.bfck").string()).step == 15u);
  }

  SUBCASE("rollout, snapshots and evaluation") {
    REQUIRE(ws.run("train --data data --config tiny.json --out m.bfck").code == 0);
    auto r = ws.run("rollout --checkpoint m.bfck --init data/pool.bmt --steps 200 --out roll.bmt --png snaps "
                    "--png-stride 50");
    REQUIRE(r.code == 0);
    const Trajectory roll = read_trajectory((ws / "roll.bmt").string());
    CHECK(roll.frames.shape() == Shape{200, 4, 32, 32});
    // Frames 0, 50, 100, 150 and 199; one image per channel.
    std::size_t images = 0;
    for (const auto& e : fs::directory_iterator(ws / "snaps")) {
      const auto img = slurp(e.path());
      CHECK(img.rfind("P6\n32 32\n255\n", 0) == 0);
      CHECK(img.size() == 13 + 3 * 32 * 32);
      ++images;
    }
    CHECK(images == 20u);
    CHECK(fs::exists(ws / "snaps/frame_00199_velocity_y.ppm"));

    REQUIRE(ws.run("rollout --checkpoint m.bfck --init data/pool.bmt --steps 200 --out again.bmt").code == 0);
    CHECK(slurp(ws / "roll.bmt") == slurp(ws / "again.bmt"));

    r = ws.run("evaluate --pred data/pool.bmt --gt data/pool.bmt --out same");
    REQUIRE(r.code == 0);
    const auto report = nlohmann::json::parse(slurp(ws / "same.json"));
    for (const auto& [name, ch] : report["channels"].items()) {
      CHECK(ch["rmse"] == 0.0);
      CHECK(ch["rel_l2"] == 0.0);
      CHECK(ch["brmse"] == 0.0);
    }
    for (const auto& w : report["heat_flux"]) CHECK(w["kl"].get<double>() < 1e-3);
    const auto csv = slurp(ws / "same.csv");
    std::istringstream lines(csv);
    std::string line;
    std::size_t rows = 0, footer = 0;
    std::getline(lines, line);
    CHECK(line.rfind("frame,", 0) == 0);
    while (std::getline(lines, line)) (line.rfind("# ", 0) == 0 ? footer : rows)++;
    CHECK(rows == 24u);
    CHECK(footer > 0u);

    CHECK(ws.run("evaluate --pred roll.bmt --gt data/pool.bmt --out bad").code == 2);
    CHECK(ws.run("rollout --checkpoint missing.bfck --init data/pool.bmt").code == 2);
  }

  SUBCASE("a diverging model exits with the frame index") {
    REQUIRE(ws.run("train --data data --config tiny.json --out m.bfck").code == 0);
    Checkpoint ck = read_checkpoint((ws / "m.bfck").string());
    for (auto& e : ck.parameters.entries())
      for (auto& v : e.value.data()) v = v * 1e30f + 1e30f;
    write_checkpoint(ck, (ws / "boom.bfck").string());
    auto r = ws.run("rollout --checkpoint boom.bfck --init data/pool.bmt --steps 10 --out nan.bmt");
    CHECK(r.code == 3);
    CHECK(r.err.find("frame 0") != std::string::npos);
    CHECK_FALSE(fs::exists(ws / "nan.bmt"));
  }
}
