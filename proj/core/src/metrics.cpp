#include "bubbleformer/metrics.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <sstream>

#include "bubbleformer/error.hpp"
#include "bubbleformer/parallel.hpp"
#include "fftw_lock.hpp"
#include "json.hpp"

namespace bubbleformer {

using nlohmann::json;

namespace {

constexpr double kEps = 1e-8;

// [H, W] or [N, H, W] viewed as N frames.
struct Frames {
  std::size_t n = 0, h = 0, w = 0;
  const double* data = nullptr;

  std::size_t plane() const { return h * w; }
  const double* frame(std::size_t t) const { return data + t * plane(); }
};

Frames frames_of(const Tensor<double>& x, const char* what) {
  const Shape& s = x.shape();
  if (s.size() == 2) return {1, s[0], s[1], x.raw()};
  if (s.size() == 3) return {s[0], s[1], s[2], x.raw()};
  throw ShapeError(std::string(what) + ": expected [H, W] or [N, H, W], got " + shape_string(s));
}

Frames matching(const Tensor<double>& a, const Tensor<double>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  return frames_of(a, what);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

Tensor<double> channel_series(const Trajectory& traj, Channel c) {
  const std::size_t n = traj.num_frames(), h = traj.height(), w = traj.width();
  Tensor<double> out({n, h, w});
  for (std::size_t t = 0; t < n; ++t) {
    const float* src = traj.frames.raw() + (t * kNumChannels + c) * h * w;
    std::copy(src, src + h * w, out.raw() + t * h * w);
  }
  return out;
}

std::vector<double> wall_heat_flux(const Tensor<double>& temperature, double conductivity, double dy,
                                   Wall wall) {
  if (temperature.rank() != 2) throw ShapeError("wall_heat_flux: expected T[H, W]");
  const std::size_t h = temperature.shape()[0], w = temperature.shape()[1];
  if (h < 3) throw ShapeError("wall_heat_flux: need at least 3 rows");
  const double* t = temperature.raw();
  const std::size_t r0 = wall == Wall::Bottom ? 0 : h - 1;
  const std::size_t r1 = wall == Wall::Bottom ? 1 : h - 2;
  const std::size_t r2 = wall == Wall::Bottom ? 2 : h - 3;
  std::vector<double> q(w);
  for (std::size_t j = 0; j < w; ++j) {
    const double dtdn = (-3.0 * t[r0 * w + j] + 4.0 * t[r1 * w + j] - t[r2 * w + j]) / (2.0 * dy);
    q[j] = -conductivity * dtdn;
  }
  return q;
}

double silverman_bandwidth(const std::vector<double>& samples) {
  if (samples.size() < 2) throw DataError("kde: need at least two samples");
  const double sigma = std_of(samples);
  const double n = static_cast<double>(samples.size());
  // Sample standard deviation (n - 1).
  const double s = sigma * std::sqrt(n / (n - 1.0));
  return std::max(1.06 * s * std::pow(n, -0.2), 1e-6);
}

std::vector<double> kde_grid(const std::vector<double>& a, const std::vector<double>& b,
                             std::size_t points) {
  if (points < 2) throw ShapeError("kde_grid: need at least two points");
  const double h = std::max(silverman_bandwidth(a), silverman_bandwidth(b));
  const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
  const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
  const double lo = std::min(*amin, *bmin) - 3.0 * h;
  const double hi = std::max(*amax, *bmax) + 3.0 * h;
  std::vector<double> grid(points);
  for (std::size_t i = 0; i < points; ++i) {
    grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  }
  return grid;
}

Density kde_pdf(const std::vector<double>& samples, const std::vector<double>& grid) {
  Density d;
  d.bandwidth = silverman_bandwidth(samples);
  d.grid = grid;
  d.pdf.assign(grid.size(), 0.0);
  const double h = d.bandwidth;
  const double norm = 1.0 / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  parallel_for(grid.size(), [&](std::size_t i) {
    double s = 0.0;
    for (double x : samples) {
      const double z = (grid[i] - x) / h;
      s += std::exp(-0.5 * z * z);
    }
    d.pdf[i] = s * norm;
  });
  return d;
}

Density kde_pdf(const std::vector<double>& samples) {
  return kde_pdf(samples, kde_grid(samples, samples));
}

double kl_divergence(const Density& p, const Density& q) {
  if (p.grid != q.grid || p.pdf.size() != p.grid.size() || q.pdf.size() != q.grid.size()) {
    throw ShapeError("kl_divergence: densities are on different grids");
  }
  double total = 0.0;
  auto integrand = [&](std::size_t i) {
    const double a = std::max(p.pdf[i], 1e-12);
    const double b = std::max(q.pdf[i], 1e-12);
    return a * std::log(a / b);
  };
  for (std::size_t i = 0; i + 1 < p.grid.size(); ++i) {
    total += 0.5 * (integrand(i) + integrand(i + 1)) * (p.grid[i + 1] - p.grid[i]);
  }
  return total;
}

std::vector<double> eikonal_per_frame(const Tensor<double>& phi, double dx, double dy) {
  const Frames f = frames_of(phi, "eikonal_loss");
  if (f.h < 3 || f.w < 3) throw ShapeError("eikonal_loss: need at least 3 points per axis");
  std::vector<double> out(f.n);
  for (std::size_t t = 0; t < f.n; ++t) {
    const double* p = f.frame(t);
    double s = 0.0;
    for (std::size_t i = 0; i < f.h; ++i) {
      for (std::size_t j = 0; j < f.w; ++j) {
        double gx, gy;
        if (j == 0) gx = (p[i * f.w + 1] - p[i * f.w]) / dx;
        else if (j == f.w - 1) gx = (p[i * f.w + j] - p[i * f.w + j - 1]) / dx;
        else gx = (p[i * f.w + j + 1] - p[i * f.w + j - 1]) / (2.0 * dx);
        if (i == 0) gy = (p[f.w + j] - p[j]) / dy;
        else if (i == f.h - 1) gy = (p[i * f.w + j] - p[(i - 1) * f.w + j]) / dy;
        else gy = (p[(i + 1) * f.w + j] - p[(i - 1) * f.w + j]) / (2.0 * dy);
        s += std::abs(std::sqrt(gx * gx + gy * gy) - 1.0);
      }
    }
    out[t] = s / static_cast<double>(f.plane());
  }
  return out;
}

double eikonal_loss(const Tensor<double>& phi, double dx, double dy) {
  return mean_of(eikonal_per_frame(phi, dx, dy));
}

VaporVolumeError vapor_volume_error(const Tensor<double>& phi_pred, const Tensor<double>& phi_gt) {
  const Frames f = matching(phi_pred, phi_gt, "vapor_volume_error");
  VaporVolumeError out;
  out.per_frame.resize(f.n);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t t = 0; t < f.n; ++t) {
    const double* a = phi_pred.raw() + t * f.plane();
    const double* b = phi_gt.raw() + t * f.plane();
    long long vp = 0, vg = 0;
    for (std::size_t i = 0; i < f.plane(); ++i) {
      vp += a[i] > 0.0;
      vg += b[i] > 0.0;
    }
    if (vg == 0) {
      ++out.skipped_frames;
      continue;
    }
    const double e = static_cast<double>(std::llabs(vp - vg)) / static_cast<double>(vg);
    out.per_frame[t] = e;
    sum += e;
    ++used;
  }
  if (used > 0) out.value = sum / static_cast<double>(used);
  return out;
}

FieldErrors field_errors(const Tensor<double>& pred, const Tensor<double>& gt) {
  const Frames f = matching(pred, gt, "field_errors");
  FieldErrors e;
  e.rmse.resize(f.n);
  e.rel_l2.resize(f.n);
  e.max_err.resize(f.n);
  for (std::size_t t = 0; t < f.n; ++t) {
    const double* a = pred.raw() + t * f.plane();
    const double* b = gt.raw() + t * f.plane();
    double sq = 0.0, ref = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < f.plane(); ++i) {
      const double d = (a[i] - b[i]) * (a[i] - b[i]);
      sq += d;
      ref += b[i] * b[i];
      mx = std::max(mx, d);
    }
    e.rmse[t] = std::sqrt(sq / static_cast<double>(f.plane()));
    e.rel_l2[t] = std::sqrt(sq) / (std::sqrt(ref) + kEps);
    e.max_err[t] = mx;
  }
  e.mean_rmse = mean_of(e.rmse);
  e.mean_rel_l2 = mean_of(e.rel_l2);
  e.max_rel_l2 = *std::max_element(e.rel_l2.begin(), e.rel_l2.end());
  e.max_error = *std::max_element(e.max_err.begin(), e.max_err.end());
  return e;
}

double boundary_rmse(const Tensor<double>& pred, const Tensor<double>& gt) {
  const Frames f = matching(pred, gt, "boundary_rmse");
  if (f.h < 2 || f.w < 2) throw ShapeError("boundary_rmse: grid must be at least 2x2");
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < f.n; ++t) {
    const double* a = pred.raw() + t * f.plane();
    const double* b = gt.raw() + t * f.plane();
    for (std::size_t i = 0; i < f.h; ++i) {
      const bool edge_row = i == 0 || i == f.h - 1;
      for (std::size_t j = 0; j < f.w; ++j) {
        if (!edge_row && j != 0 && j != f.w - 1) continue;
        const double d = a[i * f.w + j] - b[i * f.w + j];
        sq += d * d;
        ++count;
      }
    }
  }
  return std::sqrt(sq / static_cast<double>(count));
}

std::vector<std::size_t> interface_cells(const Tensor<double>& phi) {
  const Frames f = frames_of(phi, "interface_cells");
  if (f.n != 1) throw ShapeError("interface_cells: expected a single frame");
  const double* p = phi.raw();
  std::vector<char> mark(f.plane(), 0);
  auto visit = [&](std::size_t a, std::size_t b) {
    if ((p[a] > 0.0) == (p[b] > 0.0)) return;
    mark[std::abs(p[b]) < std::abs(p[a]) ? b : a] = 1;
  };
  for (std::size_t i = 0; i < f.h; ++i) {
    for (std::size_t j = 0; j < f.w; ++j) {
      const std::size_t c = i * f.w + j;
      if (j + 1 < f.w) visit(c, c + 1);
      if (i + 1 < f.h) visit(c, c + f.w);
    }
  }
  std::vector<std::size_t> cells;
  for (std::size_t c = 0; c < mark.size(); ++c) {
    if (mark[c]) cells.push_back(c);
  }
  return cells;
}

std::optional<double> interface_rmse(const Tensor<double>& pred, const Tensor<double>& gt,
                                     const Tensor<double>& phi_gt) {
  const Frames f = matching(pred, gt, "interface_rmse");
  matching(pred, phi_gt, "interface_rmse");
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < f.n; ++t) {
    Tensor<double> frame({f.h, f.w});
    std::copy(phi_gt.raw() + t * f.plane(), phi_gt.raw() + (t + 1) * f.plane(), frame.raw());
    for (std::size_t c : interface_cells(frame)) {
      const double d = pred.raw()[t * f.plane() + c] - gt.raw()[t * f.plane() + c];
      sq += d * d;
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return std::sqrt(sq / static_cast<double>(count));
}

std::vector<double> fourier_shell_spectrum(const Tensor<double>& pred, const Tensor<double>& gt,
                                           double lx, double ly) {
  const Frames f = matching(pred, gt, "fourier_band_errors");
  if (f.h < 24 || f.w < 24) throw ShapeError("fourier_band_errors: H and W must be at least 24");
  const std::size_t kmax = std::min(f.h, f.w) / 2;
  std::vector<double> shells(kmax, 0.0);

  auto* buffer = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * f.plane()));
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_2d(static_cast<int>(f.h), static_cast<int>(f.w), buffer, buffer,
                            FFTW_FORWARD, FFTW_ESTIMATE);
  }
  for (std::size_t t = 0; t < f.n; ++t) {
    const double* a = pred.raw() + t * f.plane();
    const double* b = gt.raw() + t * f.plane();
    for (std::size_t i = 0; i < f.plane(); ++i) {
      buffer[i][0] = a[i] - b[i];
      buffer[i][1] = 0.0;
    }
    fftw_execute(plan);
    for (std::size_t i = 0; i < f.h; ++i) {
      const double ky = static_cast<double>(std::min(i, f.h - i));
      for (std::size_t j = 0; j < f.w; ++j) {
        const double kx = static_cast<double>(std::min(j, f.w - j));
        const auto k = static_cast<std::size_t>(std::floor(std::sqrt(kx * kx + ky * ky)));
        if (k >= kmax) continue;
        const double* c = buffer[i * f.w + j];
        shells[k] += c[0] * c[0] + c[1] * c[1];
      }
    }
  }
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(buffer);

  const double cells = static_cast<double>(f.plane());
  const double scale = lx * ly / (cells * cells) / static_cast<double>(f.n);
  for (double& s : shells) s *= scale;
  return shells;
}

FourierBands fourier_band_errors(const Tensor<double>& pred, const Tensor<double>& gt, double lx,
                                 double ly) {
  const std::vector<double> shells = fourier_shell_spectrum(pred, gt, lx, ly);
  auto band = [&](std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t k = lo; k < hi; ++k) s += shells[k];
    return s / static_cast<double>(hi - lo);
  };
  return {band(0, kFourierLow), band(kFourierLow, kFourierHigh), band(kFourierHigh, shells.size())};
}

namespace {

const char* wall_name(Wall w) { return w == Wall::Bottom ? "bottom" : "top"; }

const char* const kChannelNames[kNumChannels] = {"phi", "temperature", "velocity_x", "velocity_y"};

WallFluxMetrics wall_metrics(const Tensor<double>& t_pred, const Tensor<double>& t_gt, double k,
                             double dy, Wall wall) {
  const Frames f = frames_of(t_gt, "heat_flux");
  WallFluxMetrics m;
  m.wall = wall;
  std::vector<double> cells_gt, cells_pred;
  Tensor<double> frame({f.h, f.w});
  for (std::size_t t = 0; t < f.n; ++t) {
    std::copy(t_gt.raw() + t * f.plane(), t_gt.raw() + (t + 1) * f.plane(), frame.raw());
    const auto qg = wall_heat_flux(frame, k, dy, wall);
    std::copy(t_pred.raw() + t * f.plane(), t_pred.raw() + (t + 1) * f.plane(), frame.raw());
    const auto qp = wall_heat_flux(frame, k, dy, wall);
    m.gt.push_back(mean_of(qg));
    m.pred.push_back(mean_of(qp));
    cells_gt.insert(cells_gt.end(), qg.begin(), qg.end());
    cells_pred.insert(cells_pred.end(), qp.begin(), qp.end());
  }
  m.mean_gt = mean_of(m.gt);
  m.std_gt = std_of(m.gt);
  m.mean_pred = mean_of(m.pred);
  m.std_pred = std_of(m.pred);
  const auto grid = kde_grid(cells_gt, cells_pred);
  m.kl = std::max(0.0, kl_divergence(kde_pdf(cells_gt, grid), kde_pdf(cells_pred, grid)));
  return m;
}

std::string fmt_optional(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

MetricsReport evaluate(const Trajectory& pred, const Trajectory& gt, const MetricsOptions& options) {
  pred.validate();
  gt.validate();
  if (pred.frames.shape() != gt.frames.shape()) {
    throw ShapeError("evaluate: trajectory shapes differ: " + shape_string(pred.frames.shape()) +
                     " vs " + shape_string(gt.frames.shape()));
  }
  MetricsReport r;
  r.frames = gt.num_frames();
  std::array<Tensor<double>, kNumChannels> p, g;
  for (std::size_t c = 0; c < kNumChannels; ++c) {
    p[c] = channel_series(pred, static_cast<Channel>(c));
    g[c] = channel_series(gt, static_cast<Channel>(c));
  }
  r.heat_flux.push_back(wall_metrics(p[kTemperature], g[kTemperature], options.conductivity, gt.dy, Wall::Bottom));
  if (options.top_wall) {
    r.heat_flux.push_back(wall_metrics(p[kTemperature], g[kTemperature], options.conductivity, gt.dy, Wall::Top));
  }
  r.eikonal_pred = eikonal_per_frame(p[kPhi], gt.dx, gt.dy);
  r.eikonal_gt = eikonal_per_frame(g[kPhi], gt.dx, gt.dy);
  r.eikonal_mean = mean_of(r.eikonal_pred);
  r.vapor_volume = vapor_volume_error(p[kPhi], g[kPhi]);
  const double lx = gt.dx * static_cast<double>(gt.width());
  const double ly = gt.dy * static_cast<double>(gt.height());
  const bool spectral = gt.height() >= 24 && gt.width() >= 24;
  for (std::size_t c = 0; c < kNumChannels; ++c) {
    ChannelMetrics& m = r.channels[c];
    m.errors = field_errors(p[c], g[c]);
    m.brmse = boundary_rmse(p[c], g[c]);
    m.irmse = interface_rmse(p[c], g[c], g[kPhi]);
    if (spectral) m.fourier = fourier_band_errors(p[c], g[c], lx, ly);
  }
  return r;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "frame";
  for (const auto& w : heat_flux) os << ",heat_flux_" << wall_name(w.wall) << "_gt,heat_flux_" << wall_name(w.wall) << "_pred";
  os << ",eikonal_pred,eikonal_gt,vapor_volume_error";
  for (const char* name : kChannelNames) os << ',' << name << "_rmse," << name << "_rel_l2," << name << "_max_err";
  os << '\n';
  for (std::size_t t = 0; t < frames; ++t) {
    os << t;
    for (const auto& w : heat_flux) os << ',' << w.gt[t] << ',' << w.pred[t];
    os << ',' << eikonal_pred[t] << ',' << eikonal_gt[t] << ',' << fmt_optional(vapor_volume.per_frame[t]);
    for (const auto& c : channels) os << ',' << c.errors.rmse[t] << ',' << c.errors.rel_l2[t] << ',' << c.errors.max_err[t];
    os << '\n';
  }
  for (const auto& w : heat_flux) {
    const std::string prefix = std::string("# heat_flux_") + wall_name(w.wall);
    os << prefix << "_mean_gt=" << w.mean_gt << '\n' << prefix << "_std_gt=" << w.std_gt << '\n'
       << prefix << "_mean_pred=" << w.mean_pred << '\n' << prefix << "_std_pred=" << w.std_pred << '\n'
       << prefix << "_kl=" << w.kl << '\n';
  }
  os << "# eikonal_mean=" << eikonal_mean << '\n';
  os << "# vapor_volume_error=" << fmt_optional(vapor_volume.value) << '\n';
  os << "# vapor_volume_skipped_frames=" << vapor_volume.skipped_frames << '\n';
  for (std::size_t c = 0; c < kNumChannels; ++c) {
    const auto& m = channels[c];
    const std::string prefix = std::string("# ") + kChannelNames[c];
    os << prefix << "_rmse=" << m.errors.mean_rmse << '\n'
       << prefix << "_rel_l2=" << m.errors.mean_rel_l2 << '\n'
       << prefix << "_max_rel_l2=" << m.errors.max_rel_l2 << '\n'
       << prefix << "_max_err=" << m.errors.max_error << '\n'
       << prefix << "_brmse=" << m.brmse << '\n'
       << prefix << "_irmse=" << fmt_optional(m.irmse) << '\n'
       << prefix << "_fourier_low=" << m.fourier.low << '\n'
       << prefix << "_fourier_mid=" << m.fourier.mid << '\n'
       << prefix << "_fourier_high=" << m.fourier.high << '\n';
  }
  return os.str();
}

std::string MetricsReport::to_json() const {
  json j;
  j["frames"] = frames;
  j["heat_flux"] = json::array();
  for (const auto& w : heat_flux) {
    j["heat_flux"].push_back({{"wall", wall_name(w.wall)},
                              {"per_frame_gt", w.gt},
                              {"per_frame_pred", w.pred},
                              {"mean_gt", w.mean_gt},
                              {"std_gt", w.std_gt},
                              {"mean_pred", w.mean_pred},
                              {"std_pred", w.std_pred},
                              {"kl", w.kl}});
  }
  j["eikonal"] = {{"per_frame_pred", eikonal_pred}, {"per_frame_gt", eikonal_gt}, {"mean", eikonal_mean}};
  json vv_frames = json::array();
  for (const auto& v : vapor_volume.per_frame) vv_frames.push_back(optional_json(v));
  j["vapor_volume_error"] = {{"mean", optional_json(vapor_volume.value)},
                             {"per_frame", vv_frames},
                             {"skipped_frames", vapor_volume.skipped_frames}};
  json ch = json::object();
  for (std::size_t c = 0; c < kNumChannels; ++c) {
    const auto& m = channels[c];
    ch[kChannelNames[c]] = {{"rmse", m.errors.mean_rmse},
                            {"rel_l2", m.errors.mean_rel_l2},
                            {"max_rel_l2", m.errors.max_rel_l2},
                            {"max_err", m.errors.max_error},
                            {"brmse", m.brmse},
                            {"irmse", optional_json(m.irmse)},
                            {"fourier", {{"low", m.fourier.low}, {"mid", m.fourier.mid}, {"high", m.fourier.high}}}};
  }
  j["channels"] = ch;
  return j.dump(2);
}

}  // namespace bubbleformer
