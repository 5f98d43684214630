#include "bubbleformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "bubbleformer/parallel.hpp"
#include "json.hpp"

namespace bubbleformer {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs", "must be positive");
  if (iterations_per_epoch == 0) throw ConfigError("iterations_per_epoch", "must be positive");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (!(base_lr >= 0.0)) throw ConfigError("base_lr", "must be non-negative");
  if (!(min_lr >= 0.0) || min_lr > base_lr) throw ConfigError("min_lr", "must lie in [0, base_lr]");
  if (warmup_steps >= total_steps()) throw ConfigError("warmup_steps", "must be smaller than the total step count");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (history == 0) throw ConfigError("history", "must be positive");
  if (forecast != history) throw ConfigError("forecast", "must equal history");
}

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::json j = {{"epochs", c.epochs},           {"iterations_per_epoch", c.iterations_per_epoch},
                      {"batch_size", c.batch_size},   {"base_lr", c.base_lr},
                      {"min_lr", c.min_lr},           {"warmup_steps", c.warmup_steps},
                      {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
                      {"beta2", c.beta2},             {"history", c.history},
                      {"forecast", c.forecast},       {"seed", c.seed}};
  return j.dump();
}

TrainConfig train_config_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("train", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train", "expected an object");
  TrainConfig c;
  auto read_count = [&j](const char* key, auto& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer() || j[key].get<long long>() < 0) {
      throw ConfigError(key, "expected a non-negative integer");
    }
    dst = j[key].get<std::remove_reference_t<decltype(dst)>>();
  };
  auto read_real = [&j](const char* key, double& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) throw ConfigError(key, "expected a number");
    dst = j[key].get<double>();
  };
  read_count("epochs", c.epochs);
  read_count("iterations_per_epoch", c.iterations_per_epoch);
  read_count("batch_size", c.batch_size);
  read_real("base_lr", c.base_lr);
  read_real("min_lr", c.min_lr);
  read_count("warmup_steps", c.warmup_steps);
  read_real("weight_decay", c.weight_decay);
  read_real("beta1", c.beta1);
  read_real("beta2", c.beta2);
  read_count("history", c.history);
  read_count("forecast", c.forecast);
  read_count("seed", c.seed);
  c.validate();
  return c;
}

// ----------------------------------------------------------------------- loss

namespace {

constexpr double kNormFloor = 1e-8;

struct FieldGroup {
  std::size_t first, count;
};
constexpr FieldGroup kGroups[3] = {{0, 1}, {1, 1}, {2, 2}};

void check_pair(const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError("loss: prediction " + shape_string(a) + " vs target " + shape_string(b));
  if (a.size() != 4 || a[1] != kNumChannels) throw ShapeError("loss: expected [k, 4, H, W], got " + shape_string(a));
}

// Per frame and group: (|pred - target|, max(|target|, floor)).
template <typename Real>
std::vector<std::pair<double, double>> group_norms(const Real* pred, const Real* target, const Shape& s) {
  const std::size_t k = s[0], plane = s[2] * s[3];
  std::vector<std::pair<double, double>> out(k * 3);
  for (std::size_t f = 0; f < k; ++f)
    for (std::size_t g = 0; g < 3; ++g) {
      double dn = 0.0, tn = 0.0;
      for (std::size_t c = kGroups[g].first; c < kGroups[g].first + kGroups[g].count; ++c) {
        const std::size_t base = (f * kNumChannels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = double(pred[base + i]) - double(target[base + i]);
          dn += d * d;
          tn += double(target[base + i]) * double(target[base + i]);
        }
      }
      out[f * 3 + g] = {std::sqrt(dn), std::max(std::sqrt(tn), kNormFloor)};
    }
  return out;
}

}  // namespace

template <typename Real>
Var<Real> bundled_relative_l2_loss(Var<Real> pred, const Tensor<Real>& target) {
  check_pair(pred.shape(), target.shape());
  const Shape s = target.shape();
  const auto norms = group_norms(pred.value().raw(), target.raw(), s);
  double total = 0.0;
  for (const auto& [dn, tn] : norms) total += dn / tn;
  const double k = double(s[0]);
  const int ip = pred.id();
  return pred.tape().push(
      "bundled_relative_l2", Tensor<Real>::scalar(static_cast<Real>(total / k)), {ip},
      [ip, target, norms, s, k](Tape<Real>& t, int self) {
        const double g = double(t.grad(self)[0]) / k;
        const Real* pv = t.value(ip).raw();
        Real* gp = t.grad_buffer(ip).raw();
        const std::size_t plane = s[2] * s[3];
        for (std::size_t f = 0; f < s[0]; ++f)
          for (std::size_t gi = 0; gi < 3; ++gi) {
            const auto [dn, tn] = norms[f * 3 + gi];
            if (dn == 0.0) continue;  // subgradient 0 at the minimum
            const double coef = g / (dn * tn);
            for (std::size_t c = kGroups[gi].first; c < kGroups[gi].first + kGroups[gi].count; ++c) {
              const std::size_t base = (f * kNumChannels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                gp[base + i] += static_cast<Real>(coef * (double(pv[base + i]) - double(target[base + i])));
              }
            }
          }
      });
}

double bundled_relative_l2_loss(const Tensor<float>& pred, const Tensor<float>& target) {
  check_pair(pred.shape(), target.shape());
  const auto norms = group_norms(pred.raw(), target.raw(), target.shape());
  double total = 0.0;
  for (const auto& [dn, tn] : norms) total += dn / tn;
  return total / double(target.shape()[0]);
}

std::vector<double> per_frame_relative_l2(const Tensor<float>& pred, const Tensor<float>& target) {
  check_pair(pred.shape(), target.shape());
  const auto norms = group_norms(pred.raw(), target.raw(), target.shape());
  std::vector<double> out(target.shape()[0], 0.0);
  for (std::size_t i = 0; i < norms.size(); ++i) out[i / 3] += norms[i].first / norms[i].second;
  return out;
}

template Var<float> bundled_relative_l2_loss(Var<float>, const Tensor<float>&);
template Var<double> bundled_relative_l2_loss(Var<double>, const Tensor<double>&);

// ---------------------------------------------------------------- optimizer

template <typename Real>
void lion_step(Tensor<Real>& param, const Tensor<Real>& grad, Tensor<Real>& momentum, double lr,
               double weight_decay, double beta1, double beta2) {
  if (param.shape() != grad.shape() || param.shape() != momentum.shape()) {
    throw ShapeError("lion_step: parameter " + shape_string(param.shape()) + ", gradient " +
                     shape_string(grad.shape()) + " and momentum " + shape_string(momentum.shape()) +
                     " must agree");
  }
  const Real b1 = Real(beta1), b2 = Real(beta2), step = Real(lr), wd = Real(weight_decay);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const Real g = grad[i];
    const Real c = b1 * momentum[i] + (Real(1) - b1) * g;
    const Real sign = c > Real(0) ? Real(1) : (c < Real(0) ? Real(-1) : Real(0));
    param[i] -= step * (sign + wd * param[i]);
    momentum[i] = b2 * momentum[i] + (Real(1) - b2) * g;
  }
}

template void lion_step(Tensor<float>&, const Tensor<float>&, Tensor<float>&, double, double, double, double);
template void lion_step(Tensor<double>&, const Tensor<double>&, Tensor<double>&, double, double, double, double);

double warmup_cosine_lr(std::size_t step, const TrainConfig& cfg) {
  const std::size_t total = cfg.total_steps();
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.base_lr * double(step) / double(cfg.warmup_steps);
  }
  if (step >= total) return cfg.min_lr;
  const double progress = double(step - cfg.warmup_steps) / double(total - cfg.warmup_steps);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ------------------------------------------------------------------ trainer

Trainer::Trainer(Bubbleformer<float>& model, TrainConfig cfg) : model_(model), cfg_(cfg) {
  cfg_.validate();
  if (cfg_.history != model_.config().window) {
    throw ConfigError("history", "must equal the model window " + std::to_string(model_.config().window));
  }
  for (const auto& e : model_.parameters().entries()) momentum_.push_back(Tensor<float>::zeros(e.value.shape()));
}

double Trainer::accumulate_gradients(const Sample& sample, std::vector<Tensor<float>>& grads) const {
  const std::size_t k = cfg_.history;
  const Trajectory& traj = *sample.traj;
  Tape<float> tape;
  const auto params = model_.bind(tape);
  Var<float> input = tape.constant(traj.frame_range(sample.window.input_start, k));
  Var<float> pred = model_.forward(params, input, traj.fluid);
  Var<float> loss = bundled_relative_l2_loss(pred, traj.frame_range(sample.window.target_start, k));
  tape.backward(loss);
  for (std::size_t i = 0; i < params.vars().size(); ++i) {
    const Tensor<float>& g = tape.grad(params.vars()[i].id());
    if (g.empty()) continue;
    Tensor<float>& acc = grads[i];
    for (std::size_t j = 0; j < g.size(); ++j) acc[j] += g[j];
  }
  return double(loss.value()[0]);
}

double Trainer::step(const std::vector<Sample>& batch) {
  if (batch.empty()) throw DataError("empty training batch");
  auto& entries = model_.parameters().entries();
  // Per-sample gradient buffers, reduced in batch order for determinism.
  std::vector<std::vector<Tensor<float>>> per_sample(batch.size());
  std::vector<double> losses(batch.size());
  // Activations for a single window are large; cap concurrency by batch size.
  parallel_for(batch.size(), [&](std::size_t b) {
    auto& grads = per_sample[b];
    for (const auto& e : entries) grads.push_back(Tensor<float>::zeros(e.value.shape()));
    losses[b] = accumulate_gradients(batch[b], grads);
  });
  const float inv = 1.0f / float(batch.size());
  const double lr = warmup_cosine_lr(step_ + 1, cfg_);
  double loss = 0.0;
  for (double l : losses) loss += l;
  loss /= double(batch.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor<float> g = std::move(per_sample[0][i]);
    for (std::size_t b = 1; b < batch.size(); ++b)
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += per_sample[b][i][j];
    for (auto& v : g.data()) v *= inv;
    lion_step(entries[i].value, g, momentum_[i], lr, cfg_.weight_decay, cfg_.beta1, cfg_.beta2);
  }
  ++step_;
  log_.push_back({step_, lr, loss});
  return loss;
}

double Trainer::train_epoch(const std::vector<Trajectory>& dataset) {
  std::vector<Sample> pool;
  for (const auto& traj : dataset) {
    for (const auto& w : window_samples(traj, cfg_.history)) pool.push_back({&traj, w});
  }
  if (pool.empty()) throw DataError("dataset has no training windows");
  std::size_t pass = 0;
  auto shuffled = [&]() {
    std::vector<Sample> order = pool;
    std::mt19937_64 rng(cfg_.seed * 0x9E3779B97F4A7C15ull + epoch_ * 1000003ull + pass++);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  };
  std::vector<Sample> order = shuffled();
  std::size_t cursor = 0;
  std::vector<double> losses;
  for (std::size_t it = 0; it < cfg_.iterations_per_epoch; ++it) {
    std::vector<Sample> batch;
    while (batch.size() < cfg_.batch_size) {
      if (cursor == order.size()) {
        order = shuffled();
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    losses.push_back(step(batch));
  }
  ++epoch_;
  // order-independent reduction
  std::sort(losses.begin(), losses.end());
  double total = 0.0;
  for (double l : losses) total += l;
  return total / double(losses.size());
}

std::string Trainer::log_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "step,lr,loss\n";
  for (const auto& r : log_) out << r.step << "," << r.lr << "," << r.loss << "\n";
  return out.str();
}

// ------------------------------------------------------------------ rollout

Tensor<float> autoregressive_rollout(const FrameStepper& step, const Tensor<float>& init_window,
                                     std::size_t steps) {
  const Shape& s = init_window.shape();
  if (s.size() != 4 || s[1] != kNumChannels) {
    throw ShapeError("rollout: initial window must be [k, 4, H, W], got " + shape_string(s));
  }
  if (steps == 0) throw ShapeError("rollout: steps must be positive");
  const std::size_t per = shape_volume(s) / s[0];
  Tensor<float> out(Shape{steps, s[1], s[2], s[3]});
  Tensor<float> window = init_window;
  std::size_t emitted = 0;
  while (emitted < steps) {
    Tensor<float> pred;
    try {
      pred = step(window);
    } catch (const NumericalError& e) {
      throw NumericalError("rollout produced non-finite values at frame " + std::to_string(emitted) + " (" +
                               e.what() + ")",
                           static_cast<long>(emitted));
    }
    if (pred.shape() != s) throw ShapeError("rollout: stepper returned " + shape_string(pred.shape()));
    for (std::size_t f = 0; f < s[0]; ++f) {
      for (std::size_t i = 0; i < per; ++i) {
        if (!std::isfinite(pred[f * per + i])) {
          throw NumericalError("rollout produced non-finite values at frame " + std::to_string(emitted + f),
                               static_cast<long>(emitted + f));
        }
      }
    }
    const std::size_t take = std::min(s[0], steps - emitted);
    std::copy_n(pred.raw(), take * per, out.raw() + emitted * per);
    emitted += take;
    window = std::move(pred);
  }
  return out;
}

Tensor<float> autoregressive_rollout(const Bubbleformer<float>& model, const Tensor<float>& init_window,
                                     const FluidDescriptor& fd, std::size_t steps) {
  return autoregressive_rollout([&](const Tensor<float>& w) { return model.predict(w, fd); }, init_window, steps);
}

}  // namespace bubbleformer
