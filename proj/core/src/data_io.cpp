#include "bubbleformer/data_io.hpp"

#include <cmath>
#include <limits>

#include "binary.hpp"
#include "json.hpp"

namespace bubbleformer {

using nlohmann::json;

Tensor<float> Trajectory::frame_range(std::size_t start, std::size_t count) const {
  if (count == 0 || start + count > num_frames()) {
    throw DataError("frame range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                    ") outside trajectory of " + std::to_string(num_frames()) + " frames");
  }
  const std::size_t per = kNumChannels * height() * width();
  std::vector<float> data(frames.raw() + start * per, frames.raw() + (start + count) * per);
  return Tensor<float>({count, kNumChannels, height(), width()}, std::move(data));
}

void Trajectory::validate() const {
  if (frames.empty()) throw DataError("trajectory has no frames");
  const Shape& s = frames.shape();
  if (s.size() != 4 || s[1] != kNumChannels) {
    throw DataError("trajectory frames must be [N, 4, H, W], got " + shape_string(s));
  }
  if (!frames.all_finite()) throw DataError("trajectory contains non-finite values");
  if (!(dx > 0) || !(dy > 0) || !(dt > 0)) throw DataError("trajectory spacing must be positive");
}

namespace {

json descriptor_json(const FluidDescriptor& fd) {
  json j = json::object();
  const auto values = fd.to_array();
  const auto& names = descriptor_field_names();
  for (std::size_t i = 0; i < values.size(); ++i) j[names[i]] = values[i];
  return j;
}

FluidDescriptor descriptor_from_json(const json& j) {
  std::array<double, FluidDescriptor::kSize> v{};
  const auto& names = descriptor_field_names();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!j.contains(names[i]) || !j[names[i]].is_number()) {
      throw DataError(std::string("header descriptor missing '") + names[i] + "'");
    }
    v[i] = j[names[i]].get<double>();
  }
  return FluidDescriptor::from_array(v);
}

json header_json(const Trajectory& t) {
  json scenario;
  try {
    scenario = json::parse(t.scenario_json);
  } catch (const json::parse_error&) {
    throw DataError("scenario metadata is not valid JSON");
  }
  return json{{"format", "BMT1"},
              {"version", kTrajectoryFormatVersion},
              {"dtype", "float32"},
              {"endianness", "little"},
              {"shape", {t.num_frames(), kNumChannels, t.height(), t.width()}},
              {"channels", {"phi", "temperature", "velocity_x", "velocity_y"}},
              {"dt", t.dt},
              {"dx", t.dx},
              {"dy", t.dy},
              {"fluid_id", t.fluid_id},
              {"descriptor", descriptor_json(t.fluid)},
              {"scenario", scenario}};
}

}  // namespace

std::string trajectory_metadata_json(const Trajectory& traj) {
  traj.validate();
  return header_json(traj).dump(2);
}

std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj) {
  traj.validate();
  const std::string header = header_json(traj).dump();
  detail::ByteWriter w;
  w.bytes("BMT1", 4);
  w.u32(kTrajectoryFormatVersion);
  w.u64(header.size());
  w.bytes(header.data(), header.size());
  w.f32(traj.frames.raw(), traj.frames.size());
  w.crc_footer();
  return std::move(w.buffer());
}

Trajectory decode_trajectory(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes, "trajectory");
  const std::uint8_t* magic = r.take(4);
  if (std::memcmp(magic, "BMT1", 4) != 0) throw DataError("trajectory: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kTrajectoryFormatVersion) {
    throw DataError("trajectory: unsupported version " + std::to_string(version));
  }
  const std::uint64_t header_len = r.u64();
  r.need(header_len);
  r.check_crc_footer();
  const auto* hp = reinterpret_cast<const char*>(r.take(header_len));
  json h;
  try {
    h = json::parse(hp, hp + header_len);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("trajectory: malformed header: ") + e.what());
  }
  Trajectory t;
  Shape shape;
  try {
    shape = h.at("shape").get<Shape>();
    if (h.at("dtype").get<std::string>() != "float32") throw DataError("trajectory: unsupported dtype");
    t.dt = h.at("dt").get<double>();
    t.dx = h.at("dx").get<double>();
    t.dy = h.at("dy").get<double>();
    t.fluid_id = h.at("fluid_id").get<std::string>();
    t.fluid = descriptor_from_json(h.at("descriptor"));
    t.scenario_json = h.at("scenario").dump();
  } catch (const json::exception& e) {
    throw DataError(std::string("trajectory: header field error: ") + e.what());
  }
  if (shape.size() != 4 || shape[1] != kNumChannels) throw DataError("trajectory: bad shape in header");
  for (std::size_t e : shape) {
    if (e == 0) throw DataError("trajectory: empty extent in header");
  }
  const std::size_t count = shape_volume(shape);
  if (r.remaining() != count * 4 + 4) throw DataError("trajectory: payload size does not match header shape");
  std::vector<float> data(count);
  r.f32(data.data(), count);
  t.frames = Tensor<float>(shape, std::move(data));
  t.validate();
  return t;
}

void write_trajectory(const Trajectory& traj, const std::string& path) {
  detail::write_file(path, encode_trajectory(traj));
}

Trajectory read_trajectory(const std::string& path) { return decode_trajectory(detail::read_file(path)); }

// ------------------------------------------------------------------ regridding

namespace {

void fill_lines(Tensor<double>& out, std::size_t ny, std::size_t nx) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Tensor<double> row_est(Shape{ny, nx}, nan), col_est(Shape{ny, nx}, nan);
  for (std::size_t j = 0; j < ny; ++j) {
    long prev = -1;
    for (std::size_t i = 0; i < nx; ++i) {
      if (!std::isfinite(out[j * nx + i])) continue;
      if (prev >= 0 && static_cast<std::size_t>(prev) + 1 < i) {
        const double a = out[j * nx + prev], b = out[j * nx + i];
        for (std::size_t m = prev + 1; m < i; ++m) {
          const double s = double(m - prev) / double(i - prev);
          row_est[j * nx + m] = a + s * (b - a);
        }
      }
      prev = static_cast<long>(i);
    }
  }
  for (std::size_t i = 0; i < nx; ++i) {
    long prev = -1;
    for (std::size_t j = 0; j < ny; ++j) {
      if (!std::isfinite(out[j * nx + i])) continue;
      if (prev >= 0 && static_cast<std::size_t>(prev) + 1 < j) {
        const double a = out[prev * nx + i], b = out[j * nx + i];
        for (std::size_t m = prev + 1; m < j; ++m) {
          const double s = double(m - prev) / double(j - prev);
          col_est[m * nx + i] = a + s * (b - a);
        }
      }
      prev = static_cast<long>(j);
    }
  }
  for (std::size_t c = 0; c < ny * nx; ++c) {
    if (std::isfinite(out[c])) continue;
    const bool hr = std::isfinite(row_est[c]), hc = std::isfinite(col_est[c]);
    if (hr && hc) out[c] = 0.5 * (row_est[c] + col_est[c]);
    else if (hr) out[c] = row_est[c];
    else if (hc) out[c] = col_est[c];
  }
}

void fill_nearest(Tensor<double>& out, std::size_t ny, std::size_t nx, double dx, double dy) {
  const Tensor<double> snapshot = out;
  const long max_r = static_cast<long>(std::max(nx, ny));
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      if (std::isfinite(snapshot[j * nx + i])) continue;
      double best_d = std::numeric_limits<double>::infinity();
      std::size_t best = 0;
      const double step = std::min(dx, dy);
      for (long r = 1; r <= max_r; ++r) {
        if (std::isfinite(best_d) && r * step > std::sqrt(best_d)) break;
        for (long dj = -r; dj <= r; ++dj)
          for (long di = -r; di <= r; ++di) {
            if (std::max(std::labs(dj), std::labs(di)) != r) continue;
            const long jj = static_cast<long>(j) + dj, ii = static_cast<long>(i) + di;
            if (jj < 0 || ii < 0 || jj >= static_cast<long>(ny) || ii >= static_cast<long>(nx)) continue;
            const std::size_t idx = static_cast<std::size_t>(jj) * nx + static_cast<std::size_t>(ii);
            if (!std::isfinite(snapshot[idx])) continue;
            const double d = (di * dx) * (di * dx) + (dj * dy) * (dj * dy);
            if (d < best_d || (d == best_d && idx < best)) {
              best_d = d;
              best = idx;
            }
          }
      }
      out[j * nx + i] = snapshot[best];
    }
}

}  // namespace

Tensor<double> regrid_with_nan_fill(const Tensor<double>& field, const UniformGrid& src,
                                    const UniformGrid& dst) {
  if (field.rank() != 2 || field.shape()[0] != src.ny || field.shape()[1] != src.nx) {
    throw ShapeError("regrid: field " + shape_string(field.shape()) + " does not match source grid");
  }
  if (dst.nx == 0 || dst.ny == 0) throw ShapeError("regrid: empty target grid");
  bool any_finite = false;
  for (double v : field.data()) any_finite = any_finite || std::isfinite(v);
  if (!any_finite) throw DataError("regrid: input has no finite samples");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  Tensor<double> out(Shape{dst.ny, dst.nx}, nan);
  for (std::size_t j = 0; j < dst.ny; ++j)
    for (std::size_t i = 0; i < dst.nx; ++i) {
      double fx = (dst.x0 + i * dst.dx - src.x0) / src.dx;
      double fy = (dst.y0 + j * dst.dy - src.y0) / src.dy;
      // snap round-off so coincident nodes copy their sample exactly
      if (std::abs(fx - std::round(fx)) < 1e-9) fx = std::round(fx);
      if (std::abs(fy - std::round(fy)) < 1e-9) fy = std::round(fy);
      if (fx < 0 || fy < 0 || fx > double(src.nx - 1) || fy > double(src.ny - 1)) continue;
      const std::size_t i0 = std::min(static_cast<std::size_t>(fx), src.nx - 1);
      const std::size_t j0 = std::min(static_cast<std::size_t>(fy), src.ny - 1);
      const double tx = fx - double(i0), ty = fy - double(j0);
      double acc = 0.0;
      bool ok = true;
      for (int b = 0; b < 2 && ok; ++b)
        for (int a = 0; a < 2 && ok; ++a) {
          const double w = (a ? tx : 1.0 - tx) * (b ? ty : 1.0 - ty);
          if (w == 0.0) continue;
          const double v = field[(j0 + b) * src.nx + (i0 + a)];
          if (!std::isfinite(v)) ok = false;
          acc += w * v;
        }
      if (ok) out[j * dst.nx + i] = acc;
    }
  fill_lines(out, dst.ny, dst.nx);
  fill_nearest(out, dst.ny, dst.nx, dst.dx, dst.dy);
  return out;
}

Tensor<double> regrid_with_nan_fill(const Tensor<double>& field) {
  if (field.rank() != 2) throw ShapeError("regrid: expected a 2D field");
  UniformGrid g{field.shape()[1], field.shape()[0], 0.0, 0.0, 1.0, 1.0};
  return regrid_with_nan_fill(field, g, g);
}

// ------------------------------------------------------------------- windows

std::vector<WindowPair> window_samples(std::size_t num_frames, std::size_t k) {
  if (k == 0) throw DataError("window length must be positive");
  if (num_frames < 2 * k) {
    throw DataError("trajectory of " + std::to_string(num_frames) + " frames is shorter than 2k = " +
                    std::to_string(2 * k));
  }
  std::vector<WindowPair> out;
  out.reserve(num_frames - 2 * k + 1);
  for (std::size_t t = k; t + k <= num_frames; ++t) out.push_back({t - k, t});
  return out;
}

std::vector<WindowPair> window_samples(const Trajectory& traj, std::size_t k) {
  return window_samples(traj.num_frames(), k);
}

}  // namespace bubbleformer
