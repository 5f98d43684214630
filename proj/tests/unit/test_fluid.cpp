#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>

#include "bubbleformer/error.hpp"
#include "bubbleformer/fluid.hpp"
#include "doctest.h"
#include "fluid_reference.hpp"

using namespace bubbleformer;

namespace {

// Round to the number of significant digits used when `printed` is written out.
double round_like(double value, double printed) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10e", printed);
  std::string mantissa(buf, std::string(buf).find('e'));
  while (mantissa.back() == '0') mantissa.pop_back();
  if (mantissa.back() == '.') mantissa.pop_back();
  int digits = 0;
  for (char c : mantissa) digits += (c >= '0' && c <= '9');
  char out[64];
  std::snprintf(out, sizeof out, "%.*e", digits - 1, value);
  return std::stod(out);
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST_CASE("nondimensional groups reproduce the reference table") {
  for (const auto& row : fixtures::kGroupRows) {
    CAPTURE(row.fluid);
    const auto n = nondimensionalize(fluid_properties(row.fluid));
    const std::pair<double, double> pairs[] = {
        {n.l_c * 1e3, row.l_c_mm},
        {n.u_c, row.u_c},
        {n.t_c * 1e3, row.t_c_ms},
        {n.density_ratio, row.density_ratio},
        {n.viscosity_ratio, row.viscosity_ratio},
        {n.conductivity_ratio, row.conductivity_ratio},
        {n.heat_capacity_ratio, row.heat_capacity_ratio},
        {n.reynolds, row.reynolds},
        {n.weber, row.weber},
        {n.prandtl, row.prandtl},
        {n.stefan_per_kelvin, row.stefan_per_kelvin},
    };
    for (const auto& [computed, printed] : pairs) {
      CAPTURE(computed);
      CAPTURE(printed);
      CHECK(rel(round_like(computed, printed), printed) < 0.01);
    }
    CHECK(std::abs(n.weber - 1.0) < 1e-10);
    CHECK(std::abs(n.bond - 1.0) < 1e-10);
    const auto& p = fluid_properties(row.fluid);
    const double weber_liquid = p.rho_l * n.u_c * n.u_c * n.l_c / p.sigma;
    CHECK(std::abs(weber_liquid - 1.0) < 0.01);
  }
}

TEST_CASE("stefan number matches every datasheet row") {
  for (const auto& row : fixtures::kStefanRows) {
    CAPTURE(row.fluid);
    CAPTURE(row.t_wall);
    const auto& p = fluid_properties(row.fluid);
    CHECK(row.t_wall - row.t_bulk == doctest::Approx(row.delta_t));
    CHECK(rel(stefan_number(p, row.delta_t), row.stefan) < 0.005);
    const double sat = (p.t_sat - row.t_bulk) / row.delta_t;
    CHECK(std::abs(sat - row.sat_fraction) < 1e-4);
  }
  CHECK(stefan_number(fluid_properties("FC-72"), 0.0) == 0.0);
  CHECK_THROWS_AS(stefan_number(fluid_properties("ln2"), -1.0), ConfigError);
}

TEST_CASE("fluid lookup and json") {
  CHECK(fluid_properties("FC_72").name == "fc72");
  CHECK_THROWS_AS(fluid_properties("mercury"), ConfigError);
  const auto& water = fluid_properties("water");
  const auto back = properties_from_json(properties_to_json(water));
  CHECK(back.rho_l == water.rho_l);
  CHECK(back.sigma == water.sigma);
  CHECK(back.g == water.g);
  try {
    properties_from_json(R"({"T_sat": 1, "rho_l": 1, "rho_v": 2, "mu_l": 1, "mu_v": 1,
      "C_pl": 1, "C_pv": 1, "k_l": 1, "k_v": 1, "h_lv": 1, "sigma": 1})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "fluid.rho_v");
  }
  CHECK_THROWS_AS(properties_from_json(R"({"T_sat": 1})"), ConfigError);
}

TEST_CASE("departure radius") {
  CHECK(departure_radius(std::numbers::pi / 4, 1.0) == doctest::Approx(0.4721).epsilon(1e-4));
  CHECK(departure_radius(0.7, 0.0) == 0.0);
  CHECK(departure_radius(0.7, 4.0) == doctest::Approx(2.0 * departure_radius(0.7, 1.0)));
  CHECK_THROWS_AS(departure_radius(0.0, 1.0), ConfigError);
}

TEST_CASE("constant flux wait time") {
  const auto& fc72 = fluid_properties("fc72");
  const auto w = wait_time_constant_flux(1e4, 1.0, fc72, std::numbers::pi / 4);
  CHECK(w.t_wait == 3.0 * w.t_growth);
  const auto w2 = wait_time_constant_flux(2e4, 1.0, fc72, std::numbers::pi / 4);
  CHECK(w2.t_wait == doctest::Approx(w.t_wait / 2));
  CHECK(w2.t_growth == doctest::Approx(w.t_growth / 2));

  // Independent evaluation carried out in mm, mg and ms.
  const double sigma = fc72.sigma;              // N/m -> mg/ms^2 (factor 1)
  const double rho_l = fc72.rho_l * 1e-3;       // kg/m^3 -> mg/mm^3
  const double rho_v = fc72.rho_v * 1e-3;
  const double g = 9.81e-3;                     // mm/ms^2
  const double l_c = std::sqrt(sigma / ((rho_l - rho_v) * g));  // mm
  const double t_c = std::sqrt(l_c / g);                        // ms
  const double r_d = 0.4251 * (std::numbers::pi / 4) * std::sqrt(2.0) * l_c;  // mm
  const double h_lv = fc72.h_lv;               // J/kg -> mm^2/ms^2 (factor 1)
  const double energy = 4.0 / 3.0 * std::numbers::pi * r_d * r_d * r_d * rho_v * h_lv;  // mg mm^2/ms^2 = 1e-6 J
  const double q = 1e4 * 1e-3;                 // W/m^2 -> mg/ms^3
  const double f = q / (1.0 * energy);         // 1/ms
  CHECK(l_c == doctest::Approx(0.7276).epsilon(1e-3));
  CHECK(w.t_wait == doctest::Approx(0.75 / f / t_c).epsilon(1e-9));
  CHECK(w.t_growth == doctest::Approx(0.25 / f / t_c).epsilon(1e-9));

  CHECK_THROWS_AS(wait_time_constant_flux(0.0, 1.0, fc72, 0.7), ConfigError);
  CHECK_THROWS_AS(wait_time_constant_flux(1.0, -1.0, fc72, 0.7), ConfigError);
}

TEST_CASE("constant temperature wait time") {
  CHECK(wait_time_constant_temp("FC-72") == 0.4);
  CHECK(wait_time_constant_temp("r515b") == 0.6);
  CHECK(wait_time_constant_temp("LN2") == 1.0);
  CHECK_THROWS_AS(wait_time_constant_temp("water"), ConfigError);
}

TEST_CASE("dynamic contact angle") {
  const double r = 0.5, a = 1.2, lim = 0.2;
  CHECK(dynamic_contact_angle(-0.1, r, a, lim) == r);
  CHECK(dynamic_contact_angle(lim / 2, r, a, lim) == doctest::Approx((r + a) / 2));
  CHECK(dynamic_contact_angle(10 * lim, r, a, lim) == a);
  CHECK(dynamic_contact_angle(0.0, r, a, lim) == r);
  CHECK(dynamic_contact_angle(lim, r, a, lim) == a);
  CHECK(dynamic_contact_angle(std::nextafter(lim, 0.0), r, a, lim) == doctest::Approx(a));
  double prev = -1;
  for (int i = -10; i <= 30; ++i) {
    const double psi = dynamic_contact_angle(0.01 * i, r, a, lim);
    CHECK(psi >= prev);
    prev = psi;
  }
  CHECK_THROWS_AS(dynamic_contact_angle(0.0, a, r, lim), ConfigError);
  CHECK_THROWS_AS(dynamic_contact_angle(0.0, r, a, 0.0), ConfigError);
}

TEST_CASE("halton sites") {
  CHECK(radical_inverse(1, 2) == 0.5);
  CHECK(radical_inverse(2, 2) == 0.25);
  CHECK(radical_inverse(3, 2) == 0.75);
  CHECK(radical_inverse(1, 3) == doctest::Approx(1.0 / 3));
  CHECK(radical_inverse(5, 3) == doctest::Approx(2.0 / 3 + 1.0 / 9));

  const HeaterExtent area{0.0, 4.0, 0.0, 2.0};
  const auto ten = halton_sites(10, area, 3);
  const auto twenty = halton_sites(20, area, 3);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(ten.sites[i].x == twenty.sites[i].x);
    CHECK(ten.sites[i].y == twenty.sites[i].y);
  }
  for (const auto& s : twenty.sites) {
    CHECK(s.x >= 0.0);
    CHECK(s.x <= 4.0);
    CHECK(s.y >= 0.0);
    CHECK(s.y <= 2.0);
  }
  for (std::size_t i = 0; i < twenty.sites.size(); ++i)
    for (std::size_t j = i + 1; j < twenty.sites.size(); ++j)
      CHECK((twenty.sites[i].x != twenty.sites[j].x || twenty.sites[i].y != twenty.sites[j].y));

  const auto line = halton_sites(3, HeaterExtent{0.0, 8.0, 0.0, 0.0});
  CHECK(line.sites[0].x == 4.0);
  CHECK(line.sites[1].x == 2.0);
  CHECK(line.sites[2].x == 6.0);
  CHECK(line.sites[2].y == 0.0);
  CHECK(line.density == doctest::Approx(3.0 / 8.0));
  CHECK(per_length_density(4.0) == 2.0);
  CHECK_THROWS_AS(halton_sites(0, area), ConfigError);
}

TEST_CASE("descriptor from fluid") {
  const auto d = make_descriptor(fluid_properties("fc72"), 33.0, 1.0, 0.4);
  CHECK(d.stefan == doctest::Approx(0.4307).epsilon(5e-3));
  CHECK(d.reynolds == doctest::Approx(231.72).epsilon(0.01));
  CHECK(d.wait_time == 0.4);
}
