#include "bubbleformer/synth.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <random>

#include "bubbleformer/error.hpp"
#include "fftw_lock.hpp"
#include "json.hpp"

namespace bubbleformer {

using nlohmann::json;

namespace {

constexpr double kTaperCells = 3.0;    // rewetting layer at heater walls
constexpr double kBandCells = 3.0;     // full-speed transport band around the interface
constexpr double kPlumeCap = 2.0;      // max plume speed in units of rise_velocity
constexpr double kSpongeFraction = 0.15;  // share of the domain next to the outflow
constexpr double kSpongeRate = 40.0;      // peak relaxation rate toward the reservoir [1/t_c]

std::size_t idx(std::size_t i, std::size_t j, std::size_t w) { return i * w + j; }

void check_grid(const Tensor<double>& phi, const char* what) {
  if (phi.rank() != 2 || phi.shape()[0] < 3 || phi.shape()[1] < 3) {
    throw ShapeError(std::string(what) + ": expected a [H, W] field with H, W >= 3");
  }
}

// Ghost values: constant across closed edges, so a one-sided difference
// there is zero and upwind stencils take no information from outside;
// linear extrapolation across open edges.
struct Padded {
  std::size_t h, w;
  const double* p;
  OpenEdges open{};

  double operator()(long i, long j) const {
    const long hh = static_cast<long>(h), ww = static_cast<long>(w);
    if (i < 0) return open.bottom ? 2.0 * (*this)(0, j) - (*this)(1, j) : (*this)(0, j);
    if (i >= hh) return open.top ? 2.0 * (*this)(hh - 1, j) - (*this)(hh - 2, j) : (*this)(hh - 1, j);
    if (j < 0) return open.left ? 2.0 * (*this)(i, 0) - (*this)(i, 1) : (*this)(i, 0);
    if (j >= ww) return open.right ? 2.0 * (*this)(i, ww - 1) - (*this)(i, ww - 2) : (*this)(i, ww - 1);
    return p[static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j)];
  }
};

double wall_distance_rows(std::size_t i, std::size_t h, Scenario s) {
  const double bottom = static_cast<double>(i);
  if (s == Scenario::Pool) return bottom;
  return std::min(bottom, static_cast<double>(h - 1 - i));
}

}  // namespace

double DomainSpec::max_speed() const {
  const double plume = kPlumeCap * rise_velocity;
  const double channel = scenario == Scenario::Flow ? 1.5 * inlet_velocity : 0.0;
  return plume + channel + effective_growth_rate();
}

double DomainSpec::departure_radius() const {
  return bubbleformer::departure_radius(contact_angle, 1.0);
}

double DomainSpec::effective_growth_rate() const {
  if (growth_rate >= 0.0) return growth_rate;
  double fastest = 0.0;
  for (double w : wait_times()) fastest = std::max(fastest, (departure_radius() - seed_radius) / (w / 3.0));
  return std::max(fastest, 0.0);
}

double DomainSpec::effective_wait_time() const {
  return wait_time >= 0.0 ? wait_time : wait_time_constant_temp(fluid);
}

std::vector<double> DomainSpec::wait_times() const {
  const std::size_t walls = scenario == Scenario::Flow ? 2 : 1;
  const std::size_t n = static_cast<std::size_t>(sites) * walls;
  if (!site_wait_times.empty()) return site_wait_times;
  return std::vector<double>(n, effective_wait_time());
}

void DomainSpec::validate() const {
  auto fail = [](const std::string& f, const std::string& msg) { throw ConfigError("scenario." + f, msg); };
  if (height < 8) fail("height", "must be at least 8");
  if (width < 8) fail("width", "must be at least 8");
  if (!(dx > 0.0) || !std::isfinite(dx)) fail("dx", "must be positive");
  if (!(dy > 0.0) || !std::isfinite(dy)) fail("dy", "must be positive");
  if (!(dt > 0.0) || !std::isfinite(dt)) fail("dt", "must be positive");
  if (frames < 1) fail("frames", "must be at least 1");
  if (stride < 1) fail("stride", "must be at least 1");
  fluid_properties(fluid);
  if (!(superheat > 0.0)) fail("superheat", "must be positive");
  if (!(bulk_temperature <= 0.0) || bulk_temperature < -1.0) fail("bulk_temperature", "must lie in [-1, 0]");
  if (!(rise_velocity >= 0.0)) fail("rise_velocity", "must be non-negative");
  if (!(inlet_velocity >= 0.0)) fail("inlet_velocity", "must be non-negative");
  if (scenario == Scenario::Pool && inlet_velocity != 0.0) fail("inlet_velocity", "only valid for flow scenarios");
  if (!std::isfinite(growth_rate)) fail("growth_rate", "must be finite");
  if (!(contact_angle > 0.0) || contact_angle >= 3.14159) fail("contact_angle", "must lie in (0, pi)");
  if (sites < 0) fail("sites", "must be non-negative");
  if (seed_skip < 0) fail("seed_skip", "must be non-negative");
  if (!(seed_radius > 0.0)) fail("seed_radius", "must be positive");
  if (reinit_interval < 1) fail("reinit_interval", "must be at least 1");
  if (reinit_iterations < 0) fail("reinit_iterations", "must be non-negative");
  if (!(thermal_layer_cells > 0.0)) fail("thermal_layer_cells", "must be positive");
  if (wait_time < 0.0) {
    try {
      wait_time_constant_temp(fluid);
    } catch (const ConfigError&) {
      fail("wait_time", "required for fluid '" + fluid + "'");
    }
  }
  const std::size_t walls = scenario == Scenario::Flow ? 2 : 1;
  if (!site_wait_times.empty() && site_wait_times.size() != static_cast<std::size_t>(sites) * walls) {
    fail("site_wait_times", "needs one entry per site");
  }
  for (double w : wait_times()) {
    if (!(w > 0.0)) fail("site_wait_times", "wait times must be positive");
  }
  if (cfl() > 0.5) {
    fail("dt", "CFL number " + std::to_string(cfl()) + " exceeds 0.5");
  }
}

DomainSpec domain_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("scenario", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("scenario", "expected an object");
  DomainSpec s;
  auto number = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    using T = std::decay_t<decltype(out)>;
    if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(std::string("scenario.") + key, "must be a number");
    } else {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0)) {
        throw ConfigError(std::string("scenario.") + key, "must be a non-negative integer");
      }
    }
    out = v.get<T>();
  };
  static const char* const known[] = {
      "scenario", "height", "width", "dx", "dy", "dt", "frames", "stride", "seed", "fluid",
      "superheat", "bulk_temperature", "rise_velocity", "inlet_velocity", "growth_rate",
      "contact_angle", "sites",
      "seed_skip", "wait_time", "site_wait_times", "seed_radius", "reinit_interval",
      "reinit_iterations", "thermal_layer_cells"};
  for (const auto& item : j.items()) {
    if (std::find(std::begin(known), std::end(known), item.key()) == std::end(known)) {
      throw ConfigError("scenario." + item.key(), "unknown key");
    }
  }
  if (j.contains("scenario")) {
    const auto& v = j["scenario"];
    if (!v.is_string() || (v != "pool" && v != "flow")) {
      throw ConfigError("scenario.scenario", "must be \"pool\" or \"flow\"");
    }
    s.scenario = v == "pool" ? Scenario::Pool : Scenario::Flow;
  }
  number("height", s.height);
  number("width", s.width);
  number("dx", s.dx);
  number("dy", s.dy);
  number("dt", s.dt);
  number("frames", s.frames);
  number("stride", s.stride);
  number("seed", s.seed);
  if (j.contains("fluid")) {
    if (!j["fluid"].is_string()) throw ConfigError("scenario.fluid", "must be a string");
    s.fluid = j["fluid"].get<std::string>();
  }
  number("superheat", s.superheat);
  number("bulk_temperature", s.bulk_temperature);
  number("rise_velocity", s.rise_velocity);
  number("inlet_velocity", s.inlet_velocity);
  number("growth_rate", s.growth_rate);
  number("contact_angle", s.contact_angle);
  number("sites", s.sites);
  number("seed_skip", s.seed_skip);
  number("wait_time", s.wait_time);
  if (j.contains("site_wait_times")) {
    const auto& v = j["site_wait_times"];
    if (!v.is_array()) throw ConfigError("scenario.site_wait_times", "must be an array");
    for (const auto& x : v) {
      if (!x.is_number()) throw ConfigError("scenario.site_wait_times", "entries must be numbers");
      s.site_wait_times.push_back(x.get<double>());
    }
  }
  number("seed_radius", s.seed_radius);
  number("reinit_interval", s.reinit_interval);
  number("reinit_iterations", s.reinit_iterations);
  number("thermal_layer_cells", s.thermal_layer_cells);
  try {
    fluid_properties(s.fluid);
  } catch (const ConfigError& e) {
    throw ConfigError("scenario.fluid", e.what());
  }
  s.validate();
  return s;
}

std::string domain_spec_to_json(const DomainSpec& s) {
  json j;
  j["scenario"] = s.scenario == Scenario::Pool ? "pool" : "flow";
  j["height"] = s.height;
  j["width"] = s.width;
  j["dx"] = s.dx;
  j["dy"] = s.dy;
  j["dt"] = s.dt;
  j["frames"] = s.frames;
  j["stride"] = s.stride;
  j["seed"] = s.seed;
  j["fluid"] = s.fluid;
  j["superheat"] = s.superheat;
  j["bulk_temperature"] = s.bulk_temperature;
  j["rise_velocity"] = s.rise_velocity;
  j["inlet_velocity"] = s.inlet_velocity;
  j["growth_rate"] = s.growth_rate;
  j["contact_angle"] = s.contact_angle;
  j["sites"] = s.sites;
  j["seed_skip"] = s.seed_skip;
  j["wait_time"] = s.wait_time;
  j["site_wait_times"] = s.site_wait_times;
  j["seed_radius"] = s.seed_radius;
  j["reinit_interval"] = s.reinit_interval;
  j["reinit_iterations"] = s.reinit_iterations;
  j["thermal_layer_cells"] = s.thermal_layer_cells;
  return j.dump(2);
}

VelocityField prescribed_velocity(const Tensor<double>& phi, double /*t*/, const DomainSpec& spec) {
  check_grid(phi, "prescribed_velocity");
  const std::size_t h = phi.shape()[0], w = phi.shape()[1];
  const double dx = spec.dx, dy = spec.dy;
  const double ly = dy * static_cast<double>(h);

  // Lift indicator: 1 on vapor and up to kBandCells into the liquid, then a
  // linear ramp over kBandCells more, so interfaces sit where the lift is
  // uniform. The reservoir's own share is removed.
  const double ramp = kBandCells * std::max(dx, dy);
  auto lift = [&](double p) { return std::clamp((p + 2.0 * ramp) / ramp, 0.0, 1.0); };
  const Tensor<double> reservoir = reservoir_levelset(spec);
  std::vector<double> m(h * w);
  for (std::size_t k = 0; k < h * w; ++k) m[k] = std::max(0.0, lift(phi[k]) - lift(reservoir[k]));

  // The divergence-free part of the body force (0, 2U m): solve
  // lap psi = -2U dm/dx with psi = 0 on every edge (sine transforms of the
  // 5-point Laplacian). Inside a round bubble the result is a uniform lift U.
  const double force = 2.0 * spec.rise_velocity;
  double* buf = fftw_alloc_real(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double right = m[idx(i, std::min(j + 1, w - 1), w)];
      const double left = m[idx(i, j == 0 ? 0 : j - 1, w)];
      buf[idx(i, j, w)] = -force * (right - left) / (2.0 * dx);
    }
  }
  fftw_plan forward, inverse;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    forward = fftw_plan_r2r_2d(static_cast<int>(h), static_cast<int>(w), buf, buf, FFTW_RODFT10, FFTW_RODFT10,
                               FFTW_ESTIMATE);
    inverse = fftw_plan_r2r_2d(static_cast<int>(h), static_cast<int>(w), buf, buf, FFTW_RODFT01, FFTW_RODFT01,
                               FFTW_ESTIMATE);
  }
  fftw_execute(forward);
  const double norm = 4.0 * static_cast<double>(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    const double sy = std::sin(std::numbers::pi * static_cast<double>(i + 1) / (2.0 * static_cast<double>(h)));
    for (std::size_t j = 0; j < w; ++j) {
      const double sx = std::sin(std::numbers::pi * static_cast<double>(j + 1) / (2.0 * static_cast<double>(w)));
      const double eig = -4.0 * (sx * sx / (dx * dx) + sy * sy / (dy * dy));
      buf[idx(i, j, w)] /= eig * norm;
    }
  }
  fftw_execute(inverse);
  std::vector<double> psi(buf, buf + h * w);
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(forward);
    fftw_destroy_plan(inverse);
  }
  fftw_free(buf);

  // Ghosts are odd across every edge: psi = 0 on the boundary faces.
  auto at = [&](long i, long j) -> double {
    double sign = 1.0;
    if (j < 0) { j = -1 - j; sign = -sign; }
    if (j >= static_cast<long>(w)) { j = 2 * static_cast<long>(w) - 1 - j; sign = -sign; }
    if (i < 0) { i = -1 - i; sign = -sign; }
    if (i >= static_cast<long>(h)) { i = 2 * static_cast<long>(h) - 1 - i; sign = -sign; }
    return sign * psi[idx(static_cast<std::size_t>(i), static_cast<std::size_t>(j), w)];
  };

  VelocityField f{Tensor<double>({h, w}), Tensor<double>({h, w})};
  double peak = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const long li = static_cast<long>(i), lj = static_cast<long>(j);
      const double u = (at(li + 1, lj) - at(li - 1, lj)) / (2.0 * dy);
      const double v = -(at(li, lj + 1) - at(li, lj - 1)) / (2.0 * dx);
      f.u[idx(i, j, w)] = u;
      f.v[idx(i, j, w)] = v;
      peak = std::max(peak, std::hypot(u, v));
    }
  }
  // Uniform rescaling keeps the field divergence free.
  const double cap = kPlumeCap * spec.rise_velocity;
  if (peak > cap) {
    const double r = cap / peak;
    for (double& x : f.u.storage()) x *= r;
    for (double& x : f.v.storage()) x *= r;
  }

  if (spec.scenario == Scenario::Flow && spec.inlet_velocity > 0.0) {
    for (std::size_t i = 0; i < h; ++i) {
      const double y = (static_cast<double>(i) + 0.5) * dy;
      const double profile = 6.0 * spec.inlet_velocity * y * (ly - y) / (ly * ly);
      for (std::size_t j = 0; j < w; ++j) f.u[idx(i, j, w)] += profile;
    }
  }
  return f;
}

Tensor<double> advect_levelset(const Tensor<double>& phi, const Tensor<double>& u,
                               const Tensor<double>& v, double dt, double dx, double dy) {
  check_grid(phi, "advect_levelset");
  if (u.shape() != phi.shape() || v.shape() != phi.shape()) {
    throw ShapeError("advect_levelset: velocity shape differs from phi");
  }
  const std::size_t h = phi.shape()[0], w = phi.shape()[1];
  double peak = 0.0;
  for (std::size_t k = 0; k < phi.size(); ++k) peak = std::max({peak, std::abs(u[k]), std::abs(v[k])});
  const double cfl = peak * dt / std::min(dx, dy);
  if (cfl > 0.5 + 1e-12) {
    throw NumericalError("advect_levelset: CFL number " + std::to_string(cfl) + " exceeds 0.5");
  }
  const Padded p{h, w, phi.raw()};
  Tensor<double> out(phi.shape());
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const long li = static_cast<long>(i), lj = static_cast<long>(j);
      const double c = p(li, lj);
      const double uu = u[idx(i, j, w)], vv = v[idx(i, j, w)];
      const double phix = uu > 0.0 ? (c - p(li, lj - 1)) / dx : (p(li, lj + 1) - c) / dx;
      const double phiy = vv > 0.0 ? (c - p(li - 1, lj)) / dy : (p(li + 1, lj) - c) / dy;
      out[idx(i, j, w)] = c - dt * (uu * phix + vv * phiy);
    }
  }
  return out;
}

Tensor<double> reinitialize_sdf(const Tensor<double>& phi, double dx, double dy, int iterations,
                                OpenEdges open) {
  check_grid(phi, "reinitialize_sdf");
  const std::size_t h = phi.shape()[0], w = phi.shape()[1];
  const double step = 0.5 * std::min(dx, dy);
  std::vector<double> sign(phi.size());
  for (std::size_t k = 0; k < phi.size(); ++k) sign[k] = phi[k] > 0.0 ? 1.0 : (phi[k] < 0.0 ? -1.0 : 0.0);

  // Subcell fix (Russo & Smereka): cells next to a sign change relax toward
  // their initial distance estimate, which keeps the zero level in place.
  std::vector<double> anchor(phi.size(), std::numeric_limits<double>::quiet_NaN());
  {
    const Padded p0{h, w, phi.raw(), open};
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const long li = static_cast<long>(i), lj = static_cast<long>(j);
        const double c = p0(li, lj);
        bool crossing = c == 0.0;
        if (j > 0) crossing = crossing || c * p0(li, lj - 1) < 0.0;
        if (j + 1 < w) crossing = crossing || c * p0(li, lj + 1) < 0.0;
        if (i > 0) crossing = crossing || c * p0(li - 1, lj) < 0.0;
        if (i + 1 < h) crossing = crossing || c * p0(li + 1, lj) < 0.0;
        if (!crossing) continue;
        const double l = p0(li, lj - 1), r = p0(li, lj + 1), dn = p0(li - 1, lj), up = p0(li + 1, lj);
        const double gx = std::max({std::abs(r - l) / 2.0, std::abs(r - c), std::abs(c - l)}) / dx;
        const double gy = std::max({std::abs(up - dn) / 2.0, std::abs(up - c), std::abs(c - dn)}) / dy;
        anchor[idx(i, j, w)] = c / std::max(std::hypot(gx, gy), 1e-12);
      }
    }
  }

  Tensor<double> cur = phi, next(phi.shape());
  for (int it = 0; it < iterations; ++it) {
    const Padded p{h, w, cur.raw(), open};
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const long li = static_cast<long>(i), lj = static_cast<long>(j);
        const double c = p(li, lj);
        const double target = anchor[idx(i, j, w)];
        if (!std::isnan(target)) {
          next[idx(i, j, w)] = c - 0.5 * (sign[idx(i, j, w)] * std::abs(c) - target);
          continue;
        }
        const double a = (c - p(li, lj - 1)) / dx;  // backward x
        const double b = (p(li, lj + 1) - c) / dx;  // forward x
        const double e = (c - p(li - 1, lj)) / dy;  // backward y
        const double d = (p(li + 1, lj) - c) / dy;  // forward y
        const double s = sign[idx(i, j, w)];
        double grad2;
        if (s > 0.0) {
          const double gx = std::max(std::max(a, 0.0) * std::max(a, 0.0), std::min(b, 0.0) * std::min(b, 0.0));
          const double gy = std::max(std::max(e, 0.0) * std::max(e, 0.0), std::min(d, 0.0) * std::min(d, 0.0));
          grad2 = gx + gy;
        } else {
          const double gx = std::max(std::min(a, 0.0) * std::min(a, 0.0), std::max(b, 0.0) * std::max(b, 0.0));
          const double gy = std::max(std::min(e, 0.0) * std::min(e, 0.0), std::max(d, 0.0) * std::max(d, 0.0));
          grad2 = gx + gy;
        }
        next[idx(i, j, w)] = c - step * s * (std::sqrt(grad2) - 1.0);
      }
    }
    std::swap(cur, next);
  }
  return cur;
}

SiteCell site_cell(const NucleationSite& site, double dx, double dy, std::size_t height,
                   std::size_t width) {
  const double col = std::floor(site.x / dx);
  const double row = std::floor(site.y / dy);
  if (!(col >= 0.0 && row >= 0.0 && col <= static_cast<double>(width) && row <= static_cast<double>(height))) {
    throw ConfigError("sites", "nucleation site outside the grid");
  }
  // A site on the far face belongs to the last cell.
  return {std::min(static_cast<std::size_t>(row), height - 1), std::min(static_cast<std::size_t>(col), width - 1)};
}

namespace {

std::vector<std::size_t> site_neighbourhood(const SiteCell& c, std::size_t h, std::size_t w) {
  std::vector<std::size_t> cells{idx(c.row, c.col, w)};
  if (c.col > 0) cells.push_back(idx(c.row, c.col - 1, w));
  if (c.col + 1 < w) cells.push_back(idx(c.row, c.col + 1, w));
  // Wall-normal neighbour points into the domain.
  if (c.row + 1 < h && c.row != h - 1) cells.push_back(idx(c.row + 1, c.col, w));
  else if (c.row > 0) cells.push_back(idx(c.row - 1, c.col, w));
  return cells;
}

}  // namespace

std::vector<std::size_t> nucleation_update(Tensor<double>& phi, NucleationSiteMap& sites, double t,
                                           const std::vector<double>& wait, double seed_radius,
                                           double dx, double dy) {
  check_grid(phi, "nucleation_update");
  if (wait.size() != sites.sites.size()) throw ShapeError("nucleation_update: one wait time per site");
  const std::size_t h = phi.shape()[0], w = phi.shape()[1];
  std::vector<std::size_t> seeded;
  for (std::size_t k = 0; k < sites.sites.size(); ++k) {
    NucleationSite& site = sites.sites[k];
    const SiteCell cell = site_cell(site, dx, dy, h, w);
    bool liquid = true;
    for (std::size_t c : site_neighbourhood(cell, h, w)) liquid = liquid && phi[c] <= 0.0;
    if (!liquid) {
      site.flagged_for_renucleation = false;
      continue;
    }
    if (!site.flagged_for_renucleation) {
      site.flagged_for_renucleation = true;
      site.last_departure_time = t;
    }
    if (t - site.last_departure_time + 1e-9 < wait[k]) continue;
    for (std::size_t i = 0; i < h; ++i) {
      const double y = (static_cast<double>(i) + 0.5) * dy;
      for (std::size_t j = 0; j < w; ++j) {
        const double x = (static_cast<double>(j) + 0.5) * dx;
        double& v = phi[idx(i, j, w)];
        v = std::max(v, seed_radius - std::hypot(x - site.x, y - site.y));
      }
    }
    site.flagged_for_renucleation = false;
    seeded.push_back(k);
  }
  return seeded;
}

Tensor<double> synth_temperature(const Tensor<double>& phi, const DomainSpec& spec, double /*t*/) {
  check_grid(phi, "synth_temperature");
  const std::size_t h = phi.shape()[0], w = phi.shape()[1];
  const double bulk = spec.bulk_temperature;
  const double t_sat = 0.0;
  const double blend = std::max(spec.dx, spec.dy);
  std::vector<char> interface(phi.size(), 0);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const bool vap = phi[idx(i, j, w)] > 0.0;
      if (j + 1 < w && vap != (phi[idx(i, j + 1, w)] > 0.0)) {
        interface[idx(i, j, w)] = interface[idx(i, j + 1, w)] = 1;
      }
      if (i + 1 < h && vap != (phi[idx(i + 1, j, w)] > 0.0)) {
        interface[idx(i, j, w)] = interface[idx(i + 1, j, w)] = 1;
      }
    }
  }
  Tensor<double> temp({h, w});
  for (std::size_t i = 0; i < h; ++i) {
    const double rows = wall_distance_rows(i, h, spec.scenario);
    const double liquid = bulk + (1.0 - bulk) * std::exp(-rows / spec.thermal_layer_cells);
    const bool heater = rows == 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t k = idx(i, j, w);
      if (heater) {
        temp[k] = 1.0;
      } else if (phi[k] > 0.0 || interface[k]) {
        temp[k] = t_sat;
      } else {
        temp[k] = t_sat + (liquid - t_sat) * (1.0 - std::exp(-std::abs(phi[k]) / blend));
      }
    }
  }
  return temp;
}

OpenEdges open_edges(Scenario scenario) {
  OpenEdges e;
  if (scenario == Scenario::Pool) {
    e.top = true;
  } else {
    e.left = true;
    e.right = true;
  }
  return e;
}

Tensor<double> reservoir_levelset(const DomainSpec& spec) {
  Tensor<double> phi({spec.height, spec.width});
  for (std::size_t i = 0; i < spec.height; ++i) {
    for (std::size_t j = 0; j < spec.width; ++j) {
      const double x = (static_cast<double>(j) + 0.5) * spec.dx;
      const double y = (static_cast<double>(i) + 0.5) * spec.dy;
      phi[idx(i, j, spec.width)] = spec.scenario == Scenario::Pool ? y - spec.ly() : x - spec.lx();
    }
  }
  return phi;
}

NucleationSiteMap scenario_sites(const DomainSpec& spec) {
  NucleationSiteMap map;
  map.seed_radius = spec.seed_radius;
  if (spec.sites == 0) return map;
  map = halton_sites(spec.sites, HeaterExtent{0.0, spec.lx(), 0.0, 0.0}, spec.seed_skip);
  if (spec.scenario == Scenario::Flow) {
    auto top = halton_sites(spec.sites, HeaterExtent{0.0, spec.lx(), spec.ly(), spec.ly()}, spec.seed_skip);
    map.sites.insert(map.sites.end(), top.sites.begin(), top.sites.end());
  }
  map.seed_radius = spec.seed_radius;
  return map;
}

SyntheticBoiling::SyntheticBoiling(DomainSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  phi_ = reservoir_levelset(spec_);
  sites_ = scenario_sites(spec_);
  wait_ = spec_.wait_times();
  seeded_at_.assign(sites_.sites.size(), -std::numeric_limits<double>::infinity());
  // Desynchronise the sites: each starts part-way through its wait.
  std::mt19937_64 rng(spec_.seed);
  for (std::size_t k = 0; k < sites_.sites.size(); ++k) {
    const double phase = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    sites_.sites[k].flagged_for_renucleation = true;
    sites_.sites[k].last_departure_time = -phase * wait_[k];
  }
  for (std::size_t k : nucleation_update(phi_, sites_, 0.0, wait_, spec_.seed_radius, spec_.dx, spec_.dy)) {
    seeded_at_[k] = 0.0;
    events_.push_back({0, k});
  }
  velocity_ = prescribed_velocity(phi_, 0.0, spec_);
}

void SyntheticBoiling::step() {
  const std::size_t h = spec_.height, w = spec_.width;
  const double band = kBandCells * std::max(spec_.dx, spec_.dy);
  // Transport only near interfaces; the far field is rebuilt by reinitialisation.
  Tensor<double> u = velocity_.u, v = velocity_.v;
  for (std::size_t k = 0; k < phi_.size(); ++k) {
    const double m = std::clamp(2.0 - std::abs(phi_[k]) / band, 0.0, 1.0);
    u[k] *= m;
    v[k] *= m;
  }
  phi_ = advect_levelset(phi_, u, v, spec_.dt, spec_.dx, spec_.dy);
  ++steps_;
  const double t = time();

  // Growth phase: attached bubbles expand for a third of their site's wait.
  const double growth = spec_.effective_growth_rate();
  for (std::size_t k = 0; k < sites_.sites.size(); ++k) {
    const double age = t - seeded_at_[k];
    if (!(age <= wait_[k] / 3.0) || growth == 0.0) continue;
    const auto& site = sites_.sites[k];
    const double reach = spec_.seed_radius + growth * wait_[k] / 3.0 + band;
    for (std::size_t i = 0; i < h; ++i) {
      const double y = (static_cast<double>(i) + 0.5) * spec_.dy;
      for (std::size_t j = 0; j < w; ++j) {
        const double x = (static_cast<double>(j) + 0.5) * spec_.dx;
        double& p = phi_[idx(i, j, w)];
        if (p > -band && std::hypot(x - site.x, y - site.y) < reach) p += growth * spec_.dt;
      }
    }
  }

  // Rewetting: the plume vanishes at the heater walls, so liquid displaces the
  // vapor foot at the rate the taper removes; bubbles then lift off.
  const double delta = kTaperCells * spec_.dy;
  for (std::size_t i = 0; i < h; ++i) {
    const double y = (static_cast<double>(i) + 0.5) * spec_.dy;
    double wall = y;
    if (spec_.scenario == Scenario::Flow) wall = std::min(wall, spec_.ly() - y);
    const double rate = spec_.rise_velocity * (1.0 - std::tanh(wall / delta));
    if (rate < 1e-6 * spec_.rise_velocity) continue;
    for (std::size_t j = 0; j < w; ++j) {
      double& p = phi_[idx(i, j, w)];
      if (p > -band) p -= rate * spec_.dt;
    }
  }

  // Outflow sponge: vapor reaching the outflow drains into the reservoir.
  const Tensor<double> reservoir = reservoir_levelset(spec_);
  const bool pool = spec_.scenario == Scenario::Pool;
  const double extent = pool ? spec_.ly() : spec_.lx();
  const double start = (1.0 - kSpongeFraction) * extent;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double pos = (static_cast<double>(pool ? i : j) + 0.5) * (pool ? spec_.dy : spec_.dx);
      if (pos <= start) continue;
      const double ramp = (pos - start) / (extent - start);
      const double rate = std::min(kSpongeRate * ramp * ramp * spec_.dt, 1.0);
      const std::size_t k = idx(i, j, w);
      phi_[k] -= rate * (phi_[k] - reservoir[k]);
    }
  }

  if (steps_ % static_cast<std::size_t>(spec_.reinit_interval) == 0) {
    phi_ = reinitialize_sdf(phi_, spec_.dx, spec_.dy, spec_.reinit_iterations, open_edges(spec_.scenario));
  }
  for (std::size_t k = 0; k < phi_.size(); ++k) phi_[k] = std::max(phi_[k], reservoir[k]);

  for (std::size_t k : nucleation_update(phi_, sites_, t, wait_, spec_.seed_radius, spec_.dx, spec_.dy)) {
    seeded_at_[k] = t;
    events_.push_back({steps_, k});
  }
  if (!phi_.all_finite()) throw NumericalError("generator produced a non-finite level set", static_cast<long>(steps_));
  velocity_ = prescribed_velocity(phi_, t, spec_);
}

Tensor<float> SyntheticBoiling::frame() const {
  const std::size_t plane = spec_.height * spec_.width;
  const Tensor<double> temp = synth_temperature(phi_, spec_, time());
  Tensor<float> out({kNumChannels, spec_.height, spec_.width});
  const Tensor<double>* fields[kNumChannels] = {&phi_, &temp, &velocity_.u, &velocity_.v};
  for (std::size_t c = 0; c < kNumChannels; ++c) {
    for (std::size_t k = 0; k < plane; ++k) out[c * plane + k] = static_cast<float>((*fields[c])[k]);
  }
  return out;
}

Trajectory generate_trajectory(const DomainSpec& spec) {
  SyntheticBoiling gen(spec);
  const std::size_t plane = kNumChannels * spec.height * spec.width;
  Trajectory traj;
  traj.frames = Tensor<float>({spec.frames, kNumChannels, spec.height, spec.width});
  for (std::size_t f = 0; f < spec.frames; ++f) {
    if (f > 0) {
      for (std::size_t s = 0; s < spec.stride; ++s) gen.step();
    }
    const Tensor<float> fr = gen.frame();
    std::copy(fr.raw(), fr.raw() + plane, traj.frames.raw() + f * plane);
  }
  traj.dx = spec.dx;
  traj.dy = spec.dy;
  traj.dt = spec.dt * static_cast<double>(spec.stride);
  traj.fluid_id = canonical_fluid_id(spec.fluid);
  const auto& props = fluid_properties(spec.fluid);
  traj.fluid = make_descriptor(props, spec.superheat, 1.0, spec.effective_wait_time());
  json scenario = json::parse(domain_spec_to_json(spec));
  scenario["boundaries"] = spec.scenario == Scenario::Pool
                               ? json{{"bottom", "wall"}, {"top", "outflow"}, {"left", "wall"}, {"right", "wall"}}
                               : json{{"bottom", "wall"}, {"top", "wall"}, {"left", "inflow"}, {"right", "outflow"}};
  scenario["heater_rows"] = spec.scenario == Scenario::Pool ? json{0} : json{0, spec.height - 1};
  scenario["nucleation_events"] = gen.events().size();
  traj.scenario_json = scenario.dump();
  return traj;
}

}  // namespace bubbleformer
