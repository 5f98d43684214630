#include "snapshot.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "bubbleformer/error.hpp"

namespace bubblebench {

using namespace bubbleformer;

namespace {

constexpr std::array<ChannelScale, kNumChannels> kScales{{
    {"phi", -0.5, 0.5, true},
    {"temperature", 0.0, 1.0, false},
    {"velocity_x", -2.0, 2.0, true},
    {"velocity_y", -2.0, 2.0, true},
}};

std::array<unsigned char, 3> colour(double s, bool diverging) {
  s = std::clamp(s, 0.0, 1.0);
  auto byte = [](double v) { return static_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5); };
  if (diverging) {
    if (s < 0.5) {
      const double a = s / 0.5;
      return {byte(a), byte(a), 255};
    }
    const double a = (1.0 - s) / 0.5;
    return {255, byte(a), byte(a)};
  }
  return {byte(3 * s), byte(3 * s - 1), byte(3 * s - 2)};
}

}  // namespace

const ChannelScale& channel_scale(Channel c) { return kScales.at(c); }

std::string render_ppm(const Tensor<float>& frames, std::size_t f, Channel c) {
  const Shape& s = frames.shape();
  if (s.size() != 4 || s[1] != kNumChannels || f >= s[0]) throw ShapeError("snapshot: bad frame or shape");
  const std::size_t h = s[2], w = s[3];
  const ChannelScale& scale = kScales[c];
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + 3 * h * w);
  const float* plane = frames.raw() + (f * kNumChannels + c) * h * w;
  for (std::size_t r = 0; r < h; ++r) {
    const std::size_t row = h - 1 - r;  // image rows run top-down
    for (std::size_t j = 0; j < w; ++j) {
      const double v = (double(plane[row * w + j]) - scale.lo) / (scale.hi - scale.lo);
      const auto px = colour(v, scale.diverging);
      std::copy(px.begin(), px.end(), out.begin() + static_cast<long>(header + 3 * (r * w + j)));
    }
  }
  return out;
}

std::vector<std::string> write_snapshots(const Tensor<float>& frames, const std::string& dir, std::size_t stride) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::size_t n = frames.shape().at(0);
  std::vector<std::size_t> picks;
  for (std::size_t f = 0; f < n; f += std::max<std::size_t>(stride, 1)) picks.push_back(f);
  if (picks.back() != n - 1) picks.push_back(n - 1);
  std::vector<std::string> paths;
  for (std::size_t f : picks) {
    for (std::size_t c = 0; c < kNumChannels; ++c) {
      char name[64];
      std::snprintf(name, sizeof name, "frame_%05zu_%s.ppm", f, kScales[c].name);
      const std::string path = (fs::path(dir) / name).string();
      std::ofstream out(path, std::ios::binary);
      const std::string img = render_ppm(frames, f, static_cast<Channel>(c));
      out.write(img.data(), static_cast<std::streamsize>(img.size()));
      if (!out) throw DataError("cannot write " + path);
      paths.push_back(path);
    }
  }
  return paths;
}

}  // namespace bubblebench
