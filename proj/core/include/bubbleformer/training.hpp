#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "bubbleformer/data_io.hpp"
#include "bubbleformer/model.hpp"

namespace bubbleformer {

struct TrainConfig {
  std::size_t epochs = 250;
  std::size_t iterations_per_epoch = 1000;
  std::size_t batch_size = 4;
  double base_lr = 5e-4;
  double min_lr = 1e-6;
  std::size_t warmup_steps = 1000;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.99;
  std::size_t history = 5;
  std::size_t forecast = 5;
  std::uint64_t seed = 0;

  std::size_t total_steps() const { return epochs * iterations_per_epoch; }
  void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(std::string_view text);

/// Mean over frames of |d phi|/|phi| + |d T|/|T| + |d (u,v)|/|(u,v)|, each
/// denominator the target norm floored at 1e-8. pred and target are [k,4,H,W].
template <typename Real>
Var<Real> bundled_relative_l2_loss(Var<Real> pred, const Tensor<Real>& target);
double bundled_relative_l2_loss(const Tensor<float>& pred, const Tensor<float>& target);

/// One Lion update in place. sign(0) = 0.
template <typename Real>
void lion_step(Tensor<Real>& param, const Tensor<Real>& grad, Tensor<Real>& momentum, double lr,
               double weight_decay, double beta1, double beta2);

/// Linear warmup from 0 to base_lr, then cosine decay to min_lr at total_steps;
/// later steps stay at min_lr.
double warmup_cosine_lr(std::size_t step, const TrainConfig& cfg);

/// One teacher-forcing window of one trajectory.
struct Sample {
  const Trajectory* traj;
  WindowPair window;
};

struct TrainLogRow {
  std::size_t step;
  double lr;
  double loss;
};

/// Teacher-forced training of a 32-bit model with Lion.
class Trainer {
 public:
  Trainer(Bubbleformer<float>& model, TrainConfig cfg);

  /// One optimizer step on the given windows; returns the mean window loss.
  double step(const std::vector<Sample>& batch);

  /// iterations_per_epoch steps over windows drawn without replacement
  /// (reshuffled when exhausted); returns the mean step loss.
  double train_epoch(const std::vector<Trajectory>& dataset);

  /// Loss and parameter gradients of one window, summed into `grads`.
  double accumulate_gradients(const Sample& sample, std::vector<Tensor<float>>& grads) const;

  std::size_t global_step() const noexcept { return step_; }
  std::size_t epoch() const noexcept { return epoch_; }
  void set_progress(std::size_t step, std::size_t epoch) { step_ = step; epoch_ = epoch; }

  std::vector<Tensor<float>>& momentum() noexcept { return momentum_; }
  const std::vector<TrainLogRow>& log() const noexcept { return log_; }
  const TrainConfig& config() const noexcept { return cfg_; }

  /// "step,lr,loss" header plus one row per optimizer step.
  std::string log_csv() const;

 private:
  Bubbleformer<float>& model_;
  TrainConfig cfg_;
  std::vector<Tensor<float>> momentum_;
  std::vector<TrainLogRow> log_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
};

using FrameStepper = std::function<Tensor<float>(const Tensor<float>&)>;

/// Feeds the last k emitted frames back in until `steps` frames exist. A
/// non-finite prediction throws NumericalError whose index() is the first
/// affected output frame.
Tensor<float> autoregressive_rollout(const FrameStepper& step, const Tensor<float>& init_window,
                                     std::size_t steps);
Tensor<float> autoregressive_rollout(const Bubbleformer<float>& model, const Tensor<float>& init_window,
                                     const FluidDescriptor& fd, std::size_t steps);

/// Per-frame bundled relative-L2 (the three field terms, no averaging over frames).
std::vector<double> per_frame_relative_l2(const Tensor<float>& pred, const Tensor<float>& target);

}  // namespace bubbleformer
