#pragma once

#include <string>
#include <vector>

#include "bubbleformer/trajectory.hpp"

namespace bubblebench {

/// Fixed value range mapped onto the colour scale of one channel.
struct ChannelScale {
  const char* name;
  double lo;
  double hi;
  bool diverging;  // blue-white-red around the midpoint, else black-red-yellow-white
};

const ChannelScale& channel_scale(bubbleformer::Channel c);

/// Binary P6 image of channel `c` of frame `f`, row 0 (heater) at the bottom.
std::string render_ppm(const bubbleformer::Tensor<float>& frames, std::size_t f, bubbleformer::Channel c);

/// One image per channel for frames 0, stride, 2*stride, ... and the last frame.
/// Returns the written paths.
std::vector<std::string> write_snapshots(const bubbleformer::Tensor<float>& frames, const std::string& dir,
                                         std::size_t stride);

}  // namespace bubblebench
