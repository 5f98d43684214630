#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "bubbleformer/tensor.hpp"
#include "bubbleformer/trajectory.hpp"

namespace bubbleformer {

/// Channel `c` of every frame as a [N, H, W] double tensor.
Tensor<double> channel_series(const Trajectory& traj, Channel c);

enum class Wall { Bottom, Top };

/// Heat flux -k dT/dn into the fluid at every cell of a wall row of T[H, W],
/// using the one-sided stencil (-3 T0 + 4 T1 - T2) / (2 dy).
std::vector<double> wall_heat_flux(const Tensor<double>& temperature, double conductivity, double dy,
                                   Wall wall = Wall::Bottom);

struct Density {
  std::vector<double> grid;
  std::vector<double> pdf;
  double bandwidth = 0.0;
};

/// Silverman's rule 1.06 sigma n^(-1/5), floored at 1e-6.
double silverman_bandwidth(const std::vector<double>& samples);

/// 512 points over [min - 3h, max + 3h] of both sample sets, h the larger bandwidth.
std::vector<double> kde_grid(const std::vector<double>& a, const std::vector<double>& b,
                             std::size_t points = 512);

/// Gaussian KDE evaluated on `grid`. Needs at least two samples.
Density kde_pdf(const std::vector<double>& samples, const std::vector<double>& grid);
Density kde_pdf(const std::vector<double>& samples);

/// Trapezoidal integral of p log(p / q), both floored at 1e-12.
double kl_divergence(const Density& p, const Density& q);

/// Mean of ||grad phi| - 1| over phi[H, W]; central differences inside,
/// one-sided at the edges. A [N, H, W] input averages over frames.
double eikonal_loss(const Tensor<double>& phi, double dx, double dy);
std::vector<double> eikonal_per_frame(const Tensor<double>& phi, double dx, double dy);

struct VaporVolumeError {
  std::optional<double> value;           // mean over frames with vapor in the reference
  std::vector<std::optional<double>> per_frame;
  std::size_t skipped_frames = 0;
};

/// Relative difference of vapor cell counts (phi > 0) per frame of [N, H, W].
VaporVolumeError vapor_volume_error(const Tensor<double>& phi_pred, const Tensor<double>& phi_gt);

struct FieldErrors {
  std::vector<double> rmse;    // per frame
  std::vector<double> rel_l2;  // per frame
  std::vector<double> max_err; // per frame, squared
  double mean_rmse = 0.0;
  double mean_rel_l2 = 0.0;
  double max_rel_l2 = 0.0;
  double max_error = 0.0;
};

/// Frame-wise RMSE, relative L2 (eps 1e-8) and squared max error of [N, H, W] series.
FieldErrors field_errors(const Tensor<double>& pred, const Tensor<double>& gt);

/// RMSE over the four edges of every frame (corners once).
double boundary_rmse(const Tensor<double>& pred, const Tensor<double>& gt);

/// Cells adjacent to a sign change of phi[H, W]; of the two cells on a
/// sign-changing edge the one with the smaller |phi| is taken. Row-major indices.
std::vector<std::size_t> interface_cells(const Tensor<double>& phi);

/// RMSE over interface cells of every frame; nullopt when there are none.
std::optional<double> interface_rmse(const Tensor<double>& pred, const Tensor<double>& gt,
                                     const Tensor<double>& phi_gt);

struct FourierBands {
  double low = 0.0;
  double mid = 0.0;
  double high = 0.0;
};

inline constexpr std::size_t kFourierLow = 4;
inline constexpr std::size_t kFourierHigh = 12;

/// Squared DFT magnitude of pred - gt summed per radial shell
/// k = floor(sqrt(kx^2 + ky^2)) (signed frequencies), averaged over frames,
/// scaled by Lx Ly / (H W)^2, then averaged per band: [0,4), [4,12), [12,K)
/// with K = min(H, W) / 2. H and W must be at least 24.
FourierBands fourier_band_errors(const Tensor<double>& pred, const Tensor<double>& gt, double lx,
                                 double ly);

/// Shell spectrum before band averaging (length K).
std::vector<double> fourier_shell_spectrum(const Tensor<double>& pred, const Tensor<double>& gt,
                                           double lx, double ly);

struct WallFluxMetrics {
  Wall wall = Wall::Bottom;
  std::vector<double> gt;    // per frame, mean over the wall
  std::vector<double> pred;
  double mean_gt = 0.0, std_gt = 0.0;
  double mean_pred = 0.0, std_pred = 0.0;
  double kl = 0.0;  // between pooled per-cell flux distributions
};

struct ChannelMetrics {
  FieldErrors errors;
  double brmse = 0.0;
  std::optional<double> irmse;
  FourierBands fourier;
};

struct MetricsReport {
  std::size_t frames = 0;
  std::vector<WallFluxMetrics> heat_flux;
  std::vector<double> eikonal_pred;
  std::vector<double> eikonal_gt;
  double eikonal_mean = 0.0;
  VaporVolumeError vapor_volume;
  std::array<ChannelMetrics, kNumChannels> channels;

  /// One row per frame, then "# key=value" aggregate lines.
  std::string to_csv() const;
  std::string to_json() const;
};

struct MetricsOptions {
  double conductivity = 1.0;
  bool top_wall = false;  // also report the top wall (channels heated on both sides)
};

/// Every metric on two trajectories of identical shape. Throws ShapeError otherwise.
MetricsReport evaluate(const Trajectory& pred, const Trajectory& gt, const MetricsOptions& options = {});

}  // namespace bubbleformer
