// bubblebench: generate, train, roll out, evaluate and inspect boiling trajectories.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numerical failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bubbleformer/checkpoint.hpp"
#include "bubbleformer/data_io.hpp"
#include "bubbleformer/error.hpp"
#include "bubbleformer/metrics.hpp"
#include "bubbleformer/parallel.hpp"
#include "bubbleformer/synth.hpp"
#include "bubbleformer/training.hpp"
#include "json.hpp"
#include "snapshot.hpp"

namespace fs = std::filesystem;
using namespace bubbleformer;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  out << text;
  if (!out) throw DataError("cannot write " + path);
}

json parse_config(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config", path + " is not valid JSON: " + e.what());
  }
}

// --------------------------------------------------------------------- generate

struct GenerateArgs {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> frames;
};

int run_generate(const GenerateArgs& a) {
  const json cfg = parse_config(a.config);
  std::vector<json> items = cfg.is_array() ? cfg.get<std::vector<json>>() : std::vector<json>{cfg};
  if (items.empty()) throw ConfigError("config", "no scenarios");

  // Validate every scenario before any simulation starts.
  std::vector<DomainSpec> specs;
  for (std::size_t i = 0; i < items.size(); ++i) {
    DomainSpec s;
    try {
      s = domain_spec_from_json(items[i].dump());
      if (a.seed) s.seed = *a.seed + i;
      if (a.frames) s.frames = *a.frames;
      s.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(cfg.is_array() ? "[" + std::to_string(i) + "]." + e.field() : e.field(),
                        std::string(e.what()).substr(e.field().size() + 2));
    }
    specs.push_back(s);
  }

  const std::string stem = fs::path(a.config).stem().string();
  fs::create_directories(a.out);
  std::vector<std::string> names(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    names[i] = (fs::path(a.out) / (specs.size() == 1 ? stem : stem + "_" + std::to_string(i))).string();
  }
  parallel_for(specs.size(), [&](std::size_t i) {
    const Trajectory traj = generate_trajectory(specs[i]);
    write_trajectory(traj, names[i] + ".bmt");
    write_text(names[i] + ".json", trajectory_metadata_json(traj));
  });
  for (const auto& n : names) std::cout << n << ".bmt\n";
  return kOk;
}

// ------------------------------------------------------------------------ train

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out = "model.bfck";
  std::string log;
  std::string resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  bool dry_run = false;
};

std::vector<Trajectory> load_dataset(const std::string& path) {
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.path().extension() == ".bmt") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(path)) {
    files.push_back(path);
  }
  if (files.empty()) throw DataError("no .bmt trajectories at " + path);
  std::vector<Trajectory> out;
  for (const auto& f : files) out.push_back(read_trajectory(f));
  return out;
}

int run_train(const TrainArgs& a) {
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = read_checkpoint(a.resume);
    model_cfg = resume->config;
    train_cfg = train_config_from_json(resume->train_config_json);
  }
  if (!a.config.empty()) {
    const json cfg = parse_config(a.config);
    if (!cfg.is_object()) throw ConfigError("config", "expected an object with 'model' and 'train'");
    for (const auto& [key, value] : cfg.items()) {
      if (key != "model" && key != "train") throw ConfigError(key, "unknown section");
    }
    if (cfg.contains("model")) {
      const ModelConfig m = model_config_from_json(cfg["model"].dump());
      if (resume && !(m == model_cfg)) throw ConfigError("model", "differs from the resumed checkpoint");
      model_cfg = m;
    }
    if (cfg.contains("train")) train_cfg = train_config_from_json(cfg["train"].dump());
  }
  if (a.seed) train_cfg.seed = *a.seed;
  if (a.steps) {
    // Whole epochs only, so checkpoints and shuffles stay aligned on resume.
    train_cfg.iterations_per_epoch = std::min(train_cfg.iterations_per_epoch, *a.steps);
    train_cfg.epochs = (*a.steps + train_cfg.iterations_per_epoch - 1) / train_cfg.iterations_per_epoch;
    train_cfg.warmup_steps = std::min(train_cfg.warmup_steps, train_cfg.total_steps() / 10);
  }
  if (train_cfg.history != model_cfg.window) {
    throw ConfigError("train.history", "must equal model.window (" + std::to_string(model_cfg.window) + ")");
  }
  train_cfg.validate();

  const std::vector<Trajectory> data = load_dataset(a.data);
  std::size_t windows = 0;
  for (const auto& t : data) {
    if (t.height() % model_cfg.patch_size || t.width() % model_cfg.patch_size) {
      throw DataError("trajectory " + std::to_string(t.height()) + "x" + std::to_string(t.width()) +
                      " is not divisible by patch size " + std::to_string(model_cfg.patch_size));
    }
    windows += window_samples(t, train_cfg.history).size();
  }

  Bubbleformer<float> model = resume ? Bubbleformer<float>(model_cfg, resume->parameters)
                                     : Bubbleformer<float>(model_cfg, train_cfg.seed);
  std::printf("model: %zu parameters, %zu trajectories, %zu windows\n", parameter_count(model_cfg), data.size(),
              windows);

  if (a.dry_run) {
    const auto& t = data.front();
    const auto pred = model.predict(t.frame_range(0, train_cfg.history), t.fluid);
    std::printf("dry run: input [%zu, 4, %zu, %zu] -> output %s\n", train_cfg.history, t.height(), t.width(),
                shape_string(pred.shape()).c_str());
    return kOk;
  }

  Trainer trainer(model, train_cfg);
  if (resume) {
    trainer.set_progress(resume->step, resume->epoch);
    if (!resume->momentum.empty()) trainer.momentum() = resume->momentum;
  }
  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  auto save = [&]() {
    Checkpoint ck;
    ck.config = model_cfg;
    ck.seed = train_cfg.seed;
    ck.step = trainer.global_step();
    ck.epoch = trainer.epoch();
    ck.train_config_json = train_config_to_json(train_cfg);
    ck.parameters = model.parameters();
    ck.momentum = trainer.momentum();
    write_checkpoint(ck, a.out);
  };
  // A resumed run appends to the existing log.
  std::string log = (resume && fs::exists(log_path)) ? read_text(log_path) : "step,lr,loss\n";
  std::size_t logged = 0;

  double loss = std::numeric_limits<double>::quiet_NaN();
  while (trainer.epoch() < train_cfg.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    loss = trainer.train_epoch(data);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("epoch %zu step %zu loss %.6g lr %.3g (%.1fs)\n", trainer.epoch(), trainer.global_step(), loss,
                trainer.log().back().lr, secs);
    std::fflush(stdout);
    for (std::size_t i = logged; i < trainer.log().size(); ++i) {
      const auto& r = trainer.log()[i];
      char line[96];
      std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", r.step, r.lr, r.loss);
      log += line;
    }
    logged = trainer.log().size();
    write_text(log_path, log);
    save();
  }
  if (std::isnan(loss)) std::printf("nothing to do: checkpoint already at epoch %zu\n", trainer.epoch());
  else std::printf("final loss %.6g\n", loss);
  return kOk;
}

// ---------------------------------------------------------------------- rollout

struct RolloutArgs {
  std::string checkpoint;
  std::string init;
  std::string out = "rollout.bmt";
  std::size_t steps = 200;
  std::size_t start = 0;
  std::string png;
  std::size_t png_stride = 10;
};

int run_rollout(const RolloutArgs& a) {
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const Bubbleformer<float> model(ck.config, ck.parameters);
  const Trajectory init = read_trajectory(a.init);
  const std::size_t k = ck.config.window;
  const Tensor<float> window = init.frame_range(a.start, k);
  if (init.height() % ck.config.patch_size || init.width() % ck.config.patch_size) {
    throw DataError("initial trajectory is not divisible by the model patch size");
  }

  Trajectory out;
  try {
    out.frames = autoregressive_rollout(model, window, init.fluid, a.steps);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "bubblebench: rollout diverged at frame %ld: %s\n", e.index(), e.what());
    return kNumerical;
  }
  out.dx = init.dx;
  out.dy = init.dy;
  out.dt = init.dt;
  out.fluid_id = init.fluid_id;
  out.fluid = init.fluid;
  json scenario = json::parse(init.scenario_json);
  scenario["rollout"] = {{"checkpoint_step", ck.step}, {"start_frame", a.start}, {"window", k}, {"steps", a.steps}};
  out.scenario_json = scenario.dump();
  write_trajectory(out, a.out);
  std::printf("%s: %zu frames\n", a.out.c_str(), out.num_frames());
  if (!a.png.empty()) {
    const auto paths = bubblebench::write_snapshots(out.frames, a.png, a.png_stride);
    std::printf("%zu snapshots in %s\n", paths.size(), a.png.c_str());
  }
  return kOk;
}

// --------------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string pred;
  std::string gt;
  std::string out = "report";
  double conductivity = 1.0;
};

int run_evaluate(const EvaluateArgs& a) {
  const Trajectory pred = read_trajectory(a.pred);
  const Trajectory gt = read_trajectory(a.gt);
  if (pred.frames.shape() != gt.frames.shape()) {
    throw DataError("shape mismatch: prediction " + shape_string(pred.frames.shape()) + " vs ground truth " +
                    shape_string(gt.frames.shape()));
  }
  MetricsOptions opt;
  opt.conductivity = a.conductivity;
  const json scenario = json::parse(gt.scenario_json);
  opt.top_wall = scenario.contains("heater_rows") && scenario["heater_rows"].size() > 1;
  const MetricsReport report = evaluate(pred, gt, opt);
  write_text(a.out + ".csv", report.to_csv());
  write_text(a.out + ".json", report.to_json());

  const auto& phi = report.channels[kPhi].errors;
  std::printf("frames %zu  phi rel-L2 %.4g  T rel-L2 %.4g  eikonal %.4g\n", report.frames, phi.mean_rel_l2,
              report.channels[kTemperature].errors.mean_rel_l2, report.eikonal_mean);
  for (const auto& w : report.heat_flux) {
    std::printf("%s wall flux: gt %.4g +- %.3g, pred %.4g +- %.3g, KL %.4g\n",
                w.wall == Wall::Bottom ? "bottom" : "top", w.mean_gt, w.std_gt, w.mean_pred, w.std_pred, w.kl);
  }
  std::printf("%s.csv %s.json\n", a.out.c_str(), a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------- inspect

struct InspectArgs {
  std::string path;
  bool eikonal = false;
};

int run_inspect(const InspectArgs& a) {
  const Trajectory t = read_trajectory(a.path);
  std::printf("file      %s\n", a.path.c_str());
  std::printf("frames    %zu\n", t.num_frames());
  std::printf("grid      %zu x %zu (H x W)\n", t.height(), t.width());
  std::printf("spacing   dx %.6g  dy %.6g  dt %.6g\n", t.dx, t.dy, t.dt);
  std::printf("fluid     %s\n", t.fluid_id.c_str());
  const auto d = t.fluid.to_array();
  const auto& names = descriptor_field_names();
  for (std::size_t i = 0; i < d.size(); ++i) std::printf("  %-20s %.6g\n", names[i], d[i]);
  const std::size_t plane = t.height() * t.width();
  for (std::size_t c = 0; c < kNumChannels; ++c) {
    float lo = std::numeric_limits<float>::infinity(), hi = -lo;
    for (std::size_t f = 0; f < t.num_frames(); ++f) {
      const float* p = t.frames.raw() + (f * kNumChannels + c) * plane;
      const auto [mn, mx] = std::minmax_element(p, p + plane);
      lo = std::min(lo, *mn);
      hi = std::max(hi, *mx);
    }
    std::printf("%-12s min %-12.6g max %.6g\n", bubblebench::channel_scale(static_cast<Channel>(c)).name, lo, hi);
  }
  if (a.eikonal) {
    const auto e = eikonal_per_frame(channel_series(t, kPhi), t.dx, t.dy);
    std::printf("frame  eikonal\n");
    for (std::size_t f = 0; f < e.size(); ++f) std::printf("%5zu  %.6f\n", f, e[f]);
    std::printf("max    %.6f\n", *std::max_element(e.begin(), e.end()));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  flush_denormals();
  CLI::App app{"Boiling trajectory generation, training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "bubblebench 0.1.0");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Run the synthetic generator for each scenario in a config");
  g->add_option("--config", gen.config, "Scenario JSON (object or array of objects)")->required()->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--seed", gen.seed, "Override the scenario seed (array entries get seed + index)");
  g->add_option("--frames", gen.frames, "Override the frame count");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Teacher-forced training on a directory of trajectories");
  t->add_option("--data", tr.data, "Trajectory file or directory of .bmt files")->required();
  t->add_option("--config", tr.config, "JSON with 'model' and 'train' sections");
  t->add_option("--out", tr.out, "Checkpoint path, rewritten after every epoch");
  t->add_option("--log", tr.log, "Loss log CSV (default <out>.log.csv)");
  t->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--seed", tr.seed, "Initialization and sampling seed");
  t->add_option("--steps", tr.steps, "Optimizer steps, rounded up to whole epochs")->check(CLI::PositiveNumber);
  t->add_flag("--dry-run", tr.dry_run, "Check data and model shapes with one forward pass");

  RolloutArgs ro;
  auto* r = app.add_subcommand("rollout", "Autoregressive forecast from a checkpoint");
  r->add_option("--checkpoint", ro.checkpoint, "Model checkpoint")->required();
  r->add_option("--init", ro.init, "Trajectory providing the initial window")->required();
  r->add_option("--start", ro.start, "First frame of the initial window");
  r->add_option("--steps", ro.steps, "Frames to emit")->check(CLI::PositiveNumber);
  r->add_option("--out", ro.out, "Output trajectory");
  r->add_option("--png", ro.png, "Directory for portable-pixmap snapshots");
  r->add_option("--png-stride", ro.png_stride, "Frames between snapshots")->check(CLI::PositiveNumber);

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Every metric of a prediction against ground truth");
  e->add_option("--pred", ev.pred, "Predicted trajectory")->required();
  e->add_option("--gt", ev.gt, "Ground-truth trajectory")->required();
  e->add_option("--out", ev.out, "Report prefix (.csv and .json are appended)");
  e->add_option("--conductivity", ev.conductivity, "Liquid conductivity for the wall heat flux");

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "Summary of a trajectory file");
  i->add_option("path", in.path, "Trajectory file")->required();
  i->add_flag("--eikonal", in.eikonal, "Per-frame Eikonal loss table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*r) return run_rollout(ro);
    if (*e) return run_evaluate(ev);
    if (*i) return run_inspect(in);
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "bubblebench: invalid configuration: %s\n", err.what());
    return kUsage;
  } catch (const NumericalError& err) {
    std::fprintf(stderr, "bubblebench: numerical failure: %s\n", err.what());
    return kNumerical;
  } catch (const DataError& err) {
    std::fprintf(stderr, "bubblebench: data error: %s\n", err.what());
    return kData;
  } catch (const ShapeError& err) {
    std::fprintf(stderr, "bubblebench: shape error: %s\n", err.what());
    return kData;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "bubblebench: %s\n", err.what());
    return kData;
  }
  return kUsage;
}
