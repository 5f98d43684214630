#include <benchmark/benchmark.h>

#include <random>

#include "bubbleformer/metrics.hpp"
#include "bubbleformer/model.hpp"
#include "bubbleformer/ops.hpp"
#include "bubbleformer/synth.hpp"
#include "bubbleformer/training.hpp"

using namespace bubbleformer;

namespace {

Tensor<float> noise(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

ModelConfig bench_config() {
  ModelConfig c;
  c.embed_dim = 64;
  c.mlp_dim = 256;
  c.num_heads = 4;
  c.num_blocks = 4;
  c.patch_size = 4;
  c.window = 5;
  return c;
}

const Trajectory& pool_trajectory() {
  static const Trajectory traj = [] {
    DomainSpec spec;
    spec.height = spec.width = 64;
    spec.frames = 24;
    spec.stride = 8;
    return generate_trajectory(spec);
  }();
  return traj;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = noise({n, n}, 1), b = noise({n, n}, 2);
  for (auto _ : state) {
    Tape<float> tape(false);
    auto c = matmul(tape.constant(a), tape.constant(b));
    benchmark::DoNotOptimize(c.value().raw());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

static void BM_AxialAttention(benchmark::State& state) {
  const Bubbleformer<float> model(bench_config(), 0);
  const auto side = static_cast<std::size_t>(state.range(0));
  const auto tokens = noise({5, side, side, 64}, 3);
  const Axis axis = state.range(1) == 0 ? Axis::Time : Axis::Height;
  for (auto _ : state) {
    Tape<float> tape(false);
    const auto p = model.bind(tape);
    auto out = model.attention(p, tape.constant(tokens), 0, axis);
    benchmark::DoNotOptimize(out.value().raw());
  }
}
BENCHMARK(BM_AxialAttention)->Args({32, 0})->Args({32, 1})->Unit(benchmark::kMillisecond);

static void BM_Predict(benchmark::State& state) {
  const Bubbleformer<float> model(bench_config(), 0);
  const auto side = static_cast<std::size_t>(state.range(0));
  const auto frames = noise({5, 4, side, side}, 4);
  const FluidDescriptor fd = pool_trajectory().fluid;
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(frames, fd).raw());
}
BENCHMARK(BM_Predict)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
  Bubbleformer<float> model(bench_config(), 0);
  TrainConfig cfg;
  cfg.history = cfg.forecast = 5;
  cfg.batch_size = 1;
  cfg.warmup_steps = 1;
  Trainer trainer(model, cfg);
  const auto& traj = pool_trajectory();
  const std::vector<Sample> batch{{&traj, window_samples(traj, 5).back()}};
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(batch));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_SynthStep(benchmark::State& state) {
  DomainSpec spec;
  spec.height = spec.width = static_cast<std::size_t>(state.range(0));
  SyntheticBoiling sim(spec);
  for (auto _ : state) sim.step();
}
BENCHMARK(BM_SynthStep)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

static void BM_Evaluate(benchmark::State& state) {
  const auto& traj = pool_trajectory();
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(traj, traj).frames);
}
BENCHMARK(BM_Evaluate)->Unit(benchmark::kMillisecond);

static void BM_Reinitialize(benchmark::State& state) {
  const auto& traj = pool_trajectory();
  const Tensor<double> phi = channel_series(traj, kPhi);
  Tensor<double> frame({traj.height(), traj.width()});
  std::copy_n(phi.raw() + phi.size() - frame.size(), frame.size(), frame.raw());
  for (auto _ : state) benchmark::DoNotOptimize(reinitialize_sdf(frame, traj.dx, traj.dy, 30).raw());
}
BENCHMARK(BM_Reinitialize)->Unit(benchmark::kMicrosecond);
BENCHMARK_MAIN();
