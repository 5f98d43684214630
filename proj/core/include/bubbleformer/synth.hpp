#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "bubbleformer/fluid.hpp"
#include "bubbleformer/tensor.hpp"
#include "bubbleformer/trajectory.hpp"

namespace bubbleformer {

enum class Scenario { Pool, Flow };

/// Kinematic boiling scenario. Lengths in capillary lengths, times in t_c,
/// temperatures scaled so the heater is 1 and saturation is 0.
///
/// Pool: heater along the bottom row, side walls, outflow at the top.
/// Flow: heaters along bottom and top rows, inflow on the left, outflow on the right.
struct DomainSpec {
  Scenario scenario = Scenario::Pool;
  std::size_t height = 128;
  std::size_t width = 128;
  double dx = 1.0 / 32;
  double dy = 1.0 / 32;
  double dt = 0.0025;
  std::size_t frames = 200;
  std::size_t stride = 16;  // solver steps per recorded frame
  std::uint64_t seed = 0;

  std::string fluid = "fc72";
  double superheat = 20.0;          // K, sets the Stefan number of the descriptor
  double bulk_temperature = 0.0;    // < 0 for subcooled pools
  double rise_velocity = 1.0;       // buoyant plume speed scale
  double inlet_velocity = 0.0;      // mean channel velocity (flow only)
  double growth_rate = -1.0;        // interface speed during the growth phase (wait / 3);
                                    // < 0: reach the departure radius by its end
  double contact_angle = 0.785398;  // static angle [rad] for the departure radius

  int sites = 1;                    // per heater wall
  int seed_skip = 0;
  double wait_time = -1.0;          // < 0: the fluid's constant-temperature value
  std::vector<double> site_wait_times;  // optional per-site override
  double seed_radius = 0.1;

  int reinit_interval = 5;
  int reinit_iterations = 30;
  double thermal_layer_cells = 5.0;

  /// Upper bound of the velocity magnitude produced by prescribed_velocity.
  double max_speed() const;
  double cfl() const { return max_speed() * dt / std::min(dx, dy); }
  double lx() const { return dx * static_cast<double>(width); }
  double ly() const { return dy * static_cast<double>(height); }
  double effective_wait_time() const;
  double departure_radius() const;
  double effective_growth_rate() const;
  std::vector<double> wait_times() const;

  /// Throws ConfigError("scenario.<field>") on invalid values, including CFL > 0.5.
  void validate() const;
};

DomainSpec domain_spec_from_json(const std::string& text);
std::string domain_spec_to_json(const DomainSpec& spec);

struct VelocityField {
  Tensor<double> u;  // [H, W], along columns
  Tensor<double> v;  // [H, W], along rows (up)
};

/// Buoyant plume plus, for flow scenarios, a Poiseuille profile. The plume is
/// the divergence-free part of an upward force on vapor widened by 3 cells and
/// ramped over 3 more; its stream function vanishes on every edge. Velocities
/// are central differences of the stream function, so the discrete divergence
/// vanishes.
VelocityField prescribed_velocity(const Tensor<double>& phi, double t, const DomainSpec& spec);

/// One first-order upwind, forward Euler step; inflow faces see a zero-gradient
/// ghost. Throws NumericalError when max|u| dt / min(dx, dy) exceeds 0.5.
Tensor<double> advect_levelset(const Tensor<double>& phi, const Tensor<double>& u,
                               const Tensor<double>& v, double dt, double dx, double dy);

/// Grid edges whose exterior continues the field (outflow, inflow). Closed
/// edges are walls.
struct OpenEdges {
  bool bottom = false;
  bool top = false;
  bool left = false;
  bool right = false;
};

/// Pool: open top. Flow: open left and right.
OpenEdges open_edges(Scenario scenario);

/// Godunov iterations of phi_tau = sign(phi0)(1 - |grad phi|), pseudo-step 0.5 min(dx, dy).
/// Cells next to a sign change relax toward phi0 / |grad phi0| instead, so the
/// zero level stays put. Closed edges contribute no upwind information, open
/// edges extrapolate linearly.
Tensor<double> reinitialize_sdf(const Tensor<double>& phi, double dx, double dy, int iterations = 20,
                                OpenEdges open = {});

/// Row/column of the cell a site snaps to (nearest cell centre).
struct SiteCell {
  std::size_t row;
  std::size_t col;
};
SiteCell site_cell(const NucleationSite& site, double dx, double dy, std::size_t height,
                   std::size_t width);

/// Advances every site's wait clock to time t. A site whose cell and its left,
/// right and wall-normal neighbours are all liquid waits; vapor there resets
/// the clock. After wait[i] of uninterrupted liquid a circle of `seed_radius`
/// is merged by phi = max(phi, r - |x - site|). Returns the seeded site indices.
std::vector<std::size_t> nucleation_update(Tensor<double>& phi, NucleationSiteMap& sites, double t,
                                           const std::vector<double>& wait, double seed_radius,
                                           double dx, double dy);

/// Heater rows at 1, exponential layer into the liquid, saturation (0) in
/// vapor and on interface cells.
Tensor<double> synth_temperature(const Tensor<double>& phi, const DomainSpec& spec, double t);

/// Level set of the vapor reservoir just beyond the outflow boundary; the
/// signed distance of an otherwise all-liquid domain.
Tensor<double> reservoir_levelset(const DomainSpec& spec);

struct NucleationEvent {
  std::size_t step;
  std::size_t site;
};

/// Step-by-step generator; generate_trajectory drives one of these.
class SyntheticBoiling {
 public:
  explicit SyntheticBoiling(DomainSpec spec);

  void step();
  std::size_t steps_taken() const { return steps_; }
  double time() const { return static_cast<double>(steps_) * spec_.dt; }
  const Tensor<double>& phi() const { return phi_; }
  const NucleationSiteMap& sites() const { return sites_; }
  const std::vector<NucleationEvent>& events() const { return events_; }
  const DomainSpec& spec() const { return spec_; }

  /// Current state as [4, H, W] (phi, T, u, v).
  Tensor<float> frame() const;

 private:
  DomainSpec spec_;
  Tensor<double> phi_;
  VelocityField velocity_;
  NucleationSiteMap sites_;
  std::vector<double> wait_;
  std::vector<double> seeded_at_;  // time of the latest seed per site, -inf before any
  std::vector<NucleationEvent> events_;
  std::size_t steps_ = 0;
};

/// spec.frames frames, one every spec.stride steps, frame 0 the initial state.
Trajectory generate_trajectory(const DomainSpec& spec);

/// Nucleation sites of a scenario (bottom heater first, then top for flow).
NucleationSiteMap scenario_sites(const DomainSpec& spec);

}  // namespace bubbleformer
