#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bubbleformer/trajectory.hpp"

namespace bubbleformer {

inline constexpr std::uint32_t kTrajectoryFormatVersion = 1;

/// BMT1 container: "BMT1", u32 version, u64 header length, JSON header,
/// float32 frames [N,4,H,W], u32 CRC32 of everything before it. All
/// integers and floats little-endian.
void write_trajectory(const Trajectory& traj, const std::string& path);
Trajectory read_trajectory(const std::string& path);

std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj);
Trajectory decode_trajectory(const std::vector<std::uint8_t>& bytes);

/// Metadata object written next to a container (shapes, geometry, fluid, scenario).
std::string trajectory_metadata_json(const Trajectory& traj);

/// Cell-centred node positions x0 + i*dx (columns) and y0 + j*dy (rows).
struct UniformGrid {
  std::size_t nx = 0;
  std::size_t ny = 0;
  double x0 = 0.0;
  double y0 = 0.0;
  double dx = 1.0;
  double dy = 1.0;
};

/// Resamples field[ny, nx] (NaN marks missing samples) onto `target`.
/// Bilinear where every contributing source node is finite; remaining holes
/// are filled linearly between the nearest finite cells of the same row and
/// column (averaged when both exist), and the rest by the nearest finite cell
/// (Euclidean, ties resolved in row-major order).
Tensor<double> regrid_with_nan_fill(const Tensor<double>& field, const UniformGrid& source,
                                    const UniformGrid& target);

/// Hole filling on the field's own grid.
Tensor<double> regrid_with_nan_fill(const Tensor<double>& field);

struct WindowPair {
  std::size_t input_start;   // frames [input_start, input_start + k)
  std::size_t target_start;  // frames [target_start, target_start + k)
};

/// All N - 2k + 1 teacher-forcing windows in order of t.
std::vector<WindowPair> window_samples(std::size_t num_frames, std::size_t k);
std::vector<WindowPair> window_samples(const Trajectory& traj, std::size_t k);

}  // namespace bubbleformer
