#include "bubbleformer/fluid.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "bubbleformer/error.hpp"
#include "json.hpp"

namespace bubbleformer {

using nlohmann::json;

namespace {

ThermophysicalProperties make(std::string name, double t_sat, double rho_l, double rho_v,
                              double mu_l, double mu_v, double cp_l, double cp_v, double k_l,
                              double k_v, double h_lv, double sigma) {
  ThermophysicalProperties p;
  p.name = std::move(name);
  p.t_sat = t_sat;
  p.rho_l = rho_l;
  p.rho_v = rho_v;
  p.mu_l = mu_l;
  p.mu_v = mu_v;
  p.cp_l = cp_l;
  p.cp_v = cp_v;
  p.k_l = k_l;
  p.k_v = k_v;
  p.h_lv = h_lv;
  p.sigma = sigma;
  return p;
}

struct NamedProperty {
  const char* key;
  double ThermophysicalProperties::*member;
};

constexpr NamedProperty kPropertyKeys[] = {
    {"T_sat", &ThermophysicalProperties::t_sat}, {"rho_l", &ThermophysicalProperties::rho_l},
    {"rho_v", &ThermophysicalProperties::rho_v}, {"mu_l", &ThermophysicalProperties::mu_l},
    {"mu_v", &ThermophysicalProperties::mu_v},   {"C_pl", &ThermophysicalProperties::cp_l},
    {"C_pv", &ThermophysicalProperties::cp_v},   {"k_l", &ThermophysicalProperties::k_l},
    {"k_v", &ThermophysicalProperties::k_v},     {"h_lv", &ThermophysicalProperties::h_lv},
    {"sigma", &ThermophysicalProperties::sigma}, {"g", &ThermophysicalProperties::g},
};

}  // namespace

void ThermophysicalProperties::validate() const {
  for (const auto& [key, member] : kPropertyKeys) {
    const double v = this->*member;
    if (!std::isfinite(v)) throw ConfigError(std::string("fluid.") + key, "must be finite");
    if (member != &ThermophysicalProperties::t_sat && v <= 0.0) {
      throw ConfigError(std::string("fluid.") + key, "must be positive");
    }
  }
  if (rho_l <= rho_v) throw ConfigError("fluid.rho_v", "vapor density must be below liquid density");
}

std::string canonical_fluid_id(std::string_view fluid_id) {
  std::string id;
  for (char c : fluid_id) {
    if (c == '-' || c == '_' || c == ' ') continue;
    id.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return id;
}

const std::vector<std::string>& known_fluids() {
  static const std::vector<std::string> ids = {"water", "fc72", "r515b", "ln2"};
  return ids;
}

const ThermophysicalProperties& fluid_properties(std::string_view fluid_id) {
  static const ThermophysicalProperties table[] = {
      make("water", 100.0, 958.35, 0.5982, 2.82e-4, 1.232e-5, 4215.7, 2080.0, 0.677, 2.457e-2,
           2.256e6, 5.891e-2),
      make("fc72", 58.0, 1575.6, 13.687, 4.18e-4, 1.177e-5, 1099.5, 879.30, 6.25e-2, 1.306e-2,
           8.4227e4, 8.112e-3),
      make("r515b", -19.0, 1313.7, 5.8361, 3.427e-4, 9.626e-6, 1263.6, 823.26, 8.887e-2,
           1.029e-2, 1.9056e5, 1.499e-2),
      make("ln2", -196.0, 807.0, 4.51, 1.62e-4, 5.428e-6, 2040.5, 1122.4, 0.145, 7.163e-3,
           1.9944e5, 8.926e-3),
  };
  const std::string id = canonical_fluid_id(fluid_id);
  for (const auto& p : table) {
    if (p.name == id) return p;
  }
  throw ConfigError("fluid", "unknown fluid id '" + std::string(fluid_id) + "'");
}

ThermophysicalProperties properties_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("fluid", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("fluid", "expected an object");
  ThermophysicalProperties p;
  p.name = j.value("name", std::string("custom"));
  for (const auto& [key, member] : kPropertyKeys) {
    if (!j.contains(key)) {
      if (std::string_view(key) == "g") continue;
      throw ConfigError(std::string("fluid.") + key, "missing");
    }
    if (!j[key].is_number()) throw ConfigError(std::string("fluid.") + key, "must be a number");
    p.*member = j[key].get<double>();
  }
  p.validate();
  return p;
}

std::string properties_to_json(const ThermophysicalProperties& props) {
  json j = json::object();
  j["name"] = props.name;
  for (const auto& [key, member] : kPropertyKeys) j[key] = props.*member;
  return j.dump(2);
}

NondimensionalGroups nondimensionalize(const ThermophysicalProperties& props) {
  props.validate();
  NondimensionalGroups n;
  n.l_c = std::sqrt(props.sigma / ((props.rho_l - props.rho_v) * props.g));
  n.u_c = std::sqrt(props.g * n.l_c);
  n.t_c = n.l_c / n.u_c;
  n.density_ratio = props.rho_v / props.rho_l;
  n.viscosity_ratio = props.mu_v / props.mu_l;
  n.conductivity_ratio = props.k_v / props.k_l;
  n.heat_capacity_ratio = props.cp_v / props.cp_l;
  n.reynolds = props.rho_l * n.u_c * n.l_c / props.mu_l;
  // Inertia measured against the buoyancy density difference; equals 1 by construction.
  n.weber = (props.rho_l - props.rho_v) * n.u_c * n.u_c * n.l_c / props.sigma;
  n.prandtl = props.mu_l * props.cp_l / props.k_l;
  n.stefan_per_kelvin = props.cp_l / props.h_lv;
  n.bond = (props.rho_l - props.rho_v) * props.g * n.l_c * n.l_c / props.sigma;
  return n;
}

double stefan_number(const ThermophysicalProperties& props, double delta_t) {
  if (!(delta_t >= 0.0)) throw ConfigError("delta_t", "must be non-negative");
  return props.cp_l * delta_t / props.h_lv;
}

double departure_radius(double contact_angle, double bond) {
  if (!(contact_angle > 0.0)) throw ConfigError("contact_angle", "must be positive");
  if (!(bond >= 0.0)) throw ConfigError("bond", "must be non-negative");
  return 0.4251 * contact_angle * std::sqrt(2.0 * bond);
}

WaitTimes wait_time_constant_flux(double q, double sites_per_mm2,
                                  const ThermophysicalProperties& props, double contact_angle) {
  if (!(q > 0.0)) throw ConfigError("heat_flux", "must be positive");
  if (!(sites_per_mm2 > 0.0)) throw ConfigError("site_density", "must be positive");
  const NondimensionalGroups n = nondimensionalize(props);
  const double radius = departure_radius(contact_angle, n.bond) * n.l_c;
  const double energy = 4.0 * std::numbers::pi / 3.0 * props.rho_v * props.h_lv * radius * radius * radius;
  const double sites_per_m2 = sites_per_mm2 * 1e6;
  const double frequency = q / (sites_per_m2 * energy);
  const double t_growth = 0.25 / frequency / n.t_c;
  return {t_growth, 3.0 * t_growth};
}

double wait_time_constant_temp(std::string_view fluid_id) {
  const std::string id = canonical_fluid_id(fluid_id);
  if (id == "fc72") return 0.4;
  if (id == "r515b") return 0.6;
  if (id == "ln2") return 1.0;
  throw ConfigError("fluid", "no constant-temperature wait time for '" + std::string(fluid_id) + "'");
}

double dynamic_contact_angle(double u_base, double receding, double advancing, double u_lim) {
  if (advancing < receding) throw ConfigError("advancing", "must not be below receding angle");
  if (!(u_lim > 0.0)) throw ConfigError("u_lim", "must be positive");
  if (u_base < 0.0) return receding;
  if (u_base >= u_lim) return advancing;
  return receding + (advancing - receding) * (u_base / u_lim);
}

double radical_inverse(std::uint64_t index, unsigned base) {
  if (base < 2) throw ConfigError("base", "must be at least 2");
  double inv = 1.0 / base;
  double factor = inv;
  double r = 0.0;
  while (index > 0) {
    r += static_cast<double>(index % base) * factor;
    index /= base;
    factor *= inv;
  }
  return r;
}

NucleationSiteMap halton_sites(int n, const HeaterExtent& heater, int seed_skip) {
  if (n <= 0) throw ConfigError("sites", "count must be positive");
  if (seed_skip < 0) throw ConfigError("seed_skip", "must be non-negative");
  if (!(heater.x1 > heater.x0) || heater.y1 < heater.y0) {
    throw ConfigError("heater", "extent must be non-empty");
  }
  NucleationSiteMap map;
  map.sites.reserve(static_cast<std::size_t>(n));
  const double width = heater.x1 - heater.x0;
  const double height = heater.y1 - heater.y0;
  for (int i = 0; i < n; ++i) {
    const auto index = static_cast<std::uint64_t>(i + seed_skip + 1);
    NucleationSite s;
    s.x = heater.x0 + width * radical_inverse(index, 2);
    s.y = heater.is_line() ? heater.y0 : heater.y0 + height * radical_inverse(index, 3);
    map.sites.push_back(s);
  }
  map.density = heater.is_line() ? n / width : n / (width * height);
  return map;
}

double per_length_density(double per_area) {
  if (!(per_area > 0.0)) throw ConfigError("site_density", "must be positive");
  return std::sqrt(per_area);
}

FluidDescriptor make_descriptor(const ThermophysicalProperties& props, double delta_t,
                                double heater_temperature, double wait_time) {
  const NondimensionalGroups n = nondimensionalize(props);
  FluidDescriptor d;
  d.reynolds = n.reynolds;
  d.prandtl = n.prandtl;
  d.stefan = stefan_number(props, delta_t);
  d.viscosity_ratio = n.viscosity_ratio;
  d.density_ratio = n.density_ratio;
  d.conductivity_ratio = n.conductivity_ratio;
  d.heat_capacity_ratio = n.heat_capacity_ratio;
  d.heater_temperature = heater_temperature;
  d.wait_time = wait_time;
  d.validate();
  return d;
}

}  // namespace bubbleformer
