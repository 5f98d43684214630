#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bubbleformer/descriptor.hpp"

namespace bubbleformer {

/// Saturation properties at 1 atm, SI units (temperature in degrees Celsius).
struct ThermophysicalProperties {
  std::string name;
  double t_sat = 0.0;
  double rho_l = 0.0, rho_v = 0.0;  // kg/m^3
  double mu_l = 0.0, mu_v = 0.0;    // Pa s
  double cp_l = 0.0, cp_v = 0.0;    // J/(kg K)
  double k_l = 0.0, k_v = 0.0;      // W/(m K)
  double h_lv = 0.0;                // J/kg
  double sigma = 0.0;               // N/m
  double g = 9.81;                  // m/s^2

  /// Throws ConfigError("fluid.<field>") for non-positive values or rho_l <= rho_v.
  void validate() const;
};

/// Built-in fluids: "water", "fc72", "r515b", "ln2". Case, '-' and '_' are
/// ignored, so "FC-72" works too. Throws ConfigError for anything else.
const ThermophysicalProperties& fluid_properties(std::string_view fluid_id);
std::string canonical_fluid_id(std::string_view fluid_id);
const std::vector<std::string>& known_fluids();

/// JSON object with keys T_sat, rho_l, rho_v, mu_l, mu_v, C_pl, C_pv, k_l, k_v,
/// h_lv, sigma and optional g, name.
ThermophysicalProperties properties_from_json(const std::string& text);
std::string properties_to_json(const ThermophysicalProperties& props);

/// Scales built on the capillary length. Ratios are vapor over liquid.
struct NondimensionalGroups {
  double l_c = 0.0;  // m
  double u_c = 0.0;  // m/s
  double t_c = 0.0;  // s
  double density_ratio = 0.0;
  double viscosity_ratio = 0.0;
  double conductivity_ratio = 0.0;
  double heat_capacity_ratio = 0.0;
  double reynolds = 0.0;
  double weber = 0.0;
  double prandtl = 0.0;
  double stefan_per_kelvin = 0.0;
  double bond = 0.0;
};

NondimensionalGroups nondimensionalize(const ThermophysicalProperties& props);

/// C_pl * delta_t / h_lv. delta_t must be >= 0.
double stefan_number(const ThermophysicalProperties& props, double delta_t);

/// Nondimensional departure radius 0.4251 * psi * sqrt(2 Bo), psi in radians.
double departure_radius(double contact_angle, double bond);

/// Growth and waiting phases, in units of t_c.
struct WaitTimes {
  double t_growth = 0.0;
  double t_wait = 0.0;
};

/// Constant heat flux q [W/m^2] removed by sites_per_mm2 active sites, each
/// departing bubble carrying the latent heat of a sphere of the departure radius.
WaitTimes wait_time_constant_flux(double q, double sites_per_mm2,
                                  const ThermophysicalProperties& props, double contact_angle);

/// Wait time for constant-temperature heaters, in units of t_c.
double wait_time_constant_temp(std::string_view fluid_id);

/// Receding angle below zero base velocity, advancing angle above u_lim,
/// linear in between. u_lim is in units of u_c.
double dynamic_contact_angle(double u_base, double receding, double advancing,
                             double u_lim = 0.2);

/// Van der Corput radical inverse of `index` in `base`.
double radical_inverse(std::uint64_t index, unsigned base);

/// Areal heater [x0,x1] x [y0,y1]; a line heater has y0 == y1.
struct HeaterExtent {
  double x0 = 0.0, x1 = 1.0;
  double y0 = 0.0, y1 = 0.0;
  bool is_line() const { return y0 == y1; }
};

struct NucleationSite {
  double x = 0.0;
  double y = 0.0;
  double last_departure_time = 0.0;
  bool flagged_for_renucleation = true;
};

struct NucleationSiteMap {
  std::vector<NucleationSite> sites;
  double density = 0.0;      // sites per unit area (or length for line heaters)
  double seed_radius = 0.1;  // units of l_c
};

/// Halton points 1 + seed_skip .. n + seed_skip in bases (2, 3) scaled to the
/// heater; line heaters use base 2 only. Growing n keeps earlier sites.
NucleationSiteMap halton_sites(int n, const HeaterExtent& heater, int seed_skip = 0);

/// Per-length site density of a line heater equivalent to a per-area density
/// (same mean site spacing).
double per_length_density(double per_area);

/// FiLM descriptor for a fluid at wall superheat delta_t [K].
FluidDescriptor make_descriptor(const ThermophysicalProperties& props, double delta_t,
                                double heater_temperature, double wait_time);

}  // namespace bubbleformer
