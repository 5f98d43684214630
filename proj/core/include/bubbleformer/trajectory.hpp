#pragma once

#include <string>

#include "bubbleformer/descriptor.hpp"
#include "bubbleformer/tensor.hpp"

namespace bubbleformer {

enum Channel : std::size_t { kPhi = 0, kTemperature = 1, kVelocityX = 2, kVelocityY = 3 };
inline constexpr std::size_t kNumChannels = 4;

/// Ordered frames [N, 4, H, W] with channel order (phi, T, u, v), row 0 at the
/// bottom (heater) wall.
struct Trajectory {
  Tensor<float> frames;
  double dx = 1.0;
  double dy = 1.0;
  double dt = 1.0;
  std::string fluid_id;
  FluidDescriptor fluid;
  std::string scenario_json = "{}";  // free-form metadata object

  std::size_t num_frames() const { return frames.empty() ? 0 : frames.shape()[0]; }
  std::size_t height() const { return frames.shape().at(2); }
  std::size_t width() const { return frames.shape().at(3); }

  /// Frames [start, start + count) as a [count, 4, H, W] tensor.
  Tensor<float> frame_range(std::size_t start, std::size_t count) const;

  /// Throws DataError unless frames are [N >= 1, 4, H, W] and finite.
  void validate() const;
};

}  // namespace bubbleformer
