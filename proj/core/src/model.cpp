#include "bubbleformer/model.hpp"

#include <cmath>
#include <random>

namespace bubbleformer {

int relative_position_bucket(long offset, int num_buckets, int max_distance) {
  const int half = num_buckets / 2;
  int bucket = offset > 0 ? half : 0;
  const long n = offset < 0 ? -offset : offset;
  const int max_exact = half / 2;
  if (n < max_exact) return bucket + static_cast<int>(n);
  const double ratio = std::log(static_cast<double>(n) / max_exact) /
                       std::log(static_cast<double>(max_distance) / max_exact);
  const int large = max_exact + static_cast<int>(ratio * (half - max_exact));
  return bucket + std::min(large, half - 1);
}

std::vector<int> relative_bucket_map(std::size_t length, int num_buckets, int max_distance) {
  std::vector<int> map(length * length);
  for (std::size_t q = 0; q < length; ++q)
    for (std::size_t k = 0; k < length; ++k)
      map[q * length + k] = relative_position_bucket(static_cast<long>(k) - static_cast<long>(q),
                                                     num_buckets, max_distance);
  return map;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename Real>
Tensor<Real> truncated_normal(const Shape& shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<Real> t(shape);
  for (auto& v : t.data()) {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    v = static_cast<Real>(z * std);
  }
  return t;
}

}  // namespace

template <typename Real>
Bubbleformer<Real>::Bubbleformer(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : parameter_layout(cfg_)) {
    Tensor<Real> value;
    if (ends_with(name, ".conv")) {
      // Both conv layouts keep the input channels on an axis of size shape[0] or shape[1].
      const bool transposed = name.rfind("reconstruct.", 0) == 0;
      const double fan_in = static_cast<double>(transposed ? shape[0] : shape[1] * 4);
      value = truncated_normal<Real>(shape, 1.0 / std::sqrt(fan_in), rng);
    } else if (ends_with(name, ".weight") || name.find(".rel_bias_") != std::string::npos) {
      value = truncated_normal<Real>(shape, 0.02, rng);
    } else if (ends_with(name, ".gain") || ends_with(name, ".low") || ends_with(name, ".high")) {
      value = Tensor<Real>::ones(shape);
    } else {
      value = Tensor<Real>::zeros(shape);
    }
    if (name == "film.fc2.bias") {
      for (std::size_t i = 0; i < cfg_.embed_dim; ++i) value[i] = Real(1);
    }
    params_.add(name, std::move(value));
  }
}

template <typename Real>
Bubbleformer<Real>::Bubbleformer(ModelConfig cfg, ParameterStore<Real> params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  const auto layout = parameter_layout(cfg_);
  if (layout.size() != params_.size()) {
    throw ShapeError("parameter store has " + std::to_string(params_.size()) + " tensors, config needs " +
                     std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& e = params_.entries()[i];
    if (e.name != layout[i].first || e.value.shape() != layout[i].second) {
      throw ShapeError("parameter '" + e.name + "' " + shape_string(e.value.shape()) +
                       " does not match expected '" + layout[i].first + "' " +
                       shape_string(layout[i].second));
    }
  }
}

template <typename Real>
BoundParameters<Real> Bubbleformer<Real>::bind(Tape<Real>& tape) const {
  std::vector<Var<Real>> vars;
  vars.reserve(params_.size());
  for (const auto& e : params_.entries()) vars.push_back(tape.leaf(e.value, tape.recording()));
  return BoundParameters<Real>(params_, std::move(vars));
}

template <typename Real>
void Bubbleformer<Real>::check_frames(const Shape& s) const {
  if (s.size() != 4 || s[1] != cfg_.in_channels) {
    throw ShapeError("expected frames [T, 4, H, W], got " + shape_string(s));
  }
  if (s[2] % cfg_.patch_size != 0 || s[3] % cfg_.patch_size != 0) {
    throw ShapeError("spatial extents " + shape_string(s) + " not divisible by patch size " +
                     std::to_string(cfg_.patch_size));
  }
}

template <typename Real>
Var<Real> Bubbleformer<Real>::embed(const BoundParameters<Real>& p, Var<Real> frames) const {
  check_frames(frames.shape());
  const std::size_t n = cfg_.stages();
  Var<Real> x = frames;
  for (std::size_t s = 0; s < n; ++s) {
    const std::string name = "embed." + std::to_string(s);
    x = add_channel_bias(strided_patch_conv(x, p(name + ".conv")), p(name + ".bias"));
    x = permute(x, {0, 2, 3, 1});
    x = layer_normalize(x, p(name + ".norm.gain"), p(name + ".norm.bias"));
    if (s + 1 < n) x = permute(gelu(x), {0, 3, 1, 2});
  }
  return x;
}

template <typename Real>
Var<Real> Bubbleformer<Real>::film(const BoundParameters<Real>& p, Var<Real> tokens,
                                   const FluidDescriptor& fd) const {
  const auto values = fd.to_array();
  Tensor<Real> d(Shape{1, FluidDescriptor::kSize});
  for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<Real>(values[i]);
  Var<Real> h = tokens.tape().constant(std::move(d));
  h = gelu(add_bias(matmul(h, p("film.fc1.weight")), p("film.fc1.bias")));
  h = add_bias(matmul(h, p("film.fc2.weight")), p("film.fc2.bias"));
  const std::size_t e = cfg_.embed_dim;
  Var<Real> gamma = reshape(slice_lastdim(h, 0, e), {e});
  Var<Real> beta = reshape(slice_lastdim(h, e, e), {e});
  return channel_affine(tokens, gamma, beta);
}

template <typename Real>
Var<Real> Bubbleformer<Real>::attention(const BoundParameters<Real>& p, Var<Real> tokens,
                                        std::size_t block, Axis axis) const {
  const Shape s = tokens.shape();
  if (s.size() != 4 || s[3] != cfg_.embed_dim) {
    throw ShapeError("attention expects tokens [T, Hp, Wp, E], got " + shape_string(s));
  }
  const std::size_t t = s[0], hp = s[1], wp = s[2], e = s[3];
  const std::string prefix = "blocks." + std::to_string(block) + ".";
  std::vector<std::size_t> to_seq, from_seq;
  std::size_t len = 0;
  std::string proj, tag;
  switch (axis) {
    case Axis::Time:
      to_seq = {1, 2, 0, 3};
      from_seq = {2, 0, 1, 3};
      len = t;
      proj = "attn_t";
      tag = "t";
      break;
    case Axis::Height:
      to_seq = {0, 2, 1, 3};
      from_seq = {0, 2, 1, 3};
      len = hp;
      proj = "attn_s";
      tag = "h";
      break;
    case Axis::Width:
      len = wp;
      proj = "attn_s";
      tag = "w";
      break;
  }
  const std::size_t seqs = t * hp * wp / len;
  const std::size_t heads = cfg_.num_heads, d = cfg_.head_dim();

  Var<Real> x = to_seq.empty() ? tokens : permute(tokens, to_seq);
  const Shape folded = x.shape();
  x = reshape(x, {seqs, len, e});
  Var<Real> qkv = add_bias(matmul(x, p(prefix + proj + ".qkv.weight")), p(prefix + proj + ".qkv.bias"));
  auto split_heads = [&](std::size_t offset) {
    return permute(reshape(slice_lastdim(qkv, offset, e), {seqs, len, heads, d}), {0, 2, 1, 3});
  };
  Var<Real> q = split_heads(0), k = split_heads(e), v = split_heads(2 * e);

  Var<Real> scores = scale(matmul(q, transpose_last2(k)), Real(1) / std::sqrt(Real(d)));
  const auto buckets = relative_bucket_map(len, static_cast<int>(cfg_.rel_buckets),
                                           static_cast<int>(cfg_.rel_max_distance));
  scores = add_relative_bias(scores, p(prefix + "rel_bias_" + tag), buckets);
  Var<Real> w = softmax_lastdim(scores);
  w = attention_frequency_scale(w, p(prefix + "omega_" + tag + ".low"), p(prefix + "omega_" + tag + ".high"));
  Var<Real> out = matmul(w, v);
  if (MacCounts* counts = active_mac_counts()) {
    counts->attention_mixing += 2ull * seqs * heads * len * len * d;
    counts->attention_per_sequence += 2ull * len * len * e;
  }
  out = reshape(permute(out, {0, 2, 1, 3}), {seqs, len, e});
  out = add_bias(matmul(out, p(prefix + proj + ".proj.weight")), p(prefix + proj + ".proj.bias"));
  out = reshape(out, folded);
  return from_seq.empty() ? out : permute(out, from_seq);
}

template <typename Real>
Var<Real> Bubbleformer<Real>::block(const BoundParameters<Real>& p, Var<Real> x, std::size_t b) const {
  const std::string prefix = "blocks." + std::to_string(b) + ".";
  auto norm = [&](Var<Real> v, const char* name) {
    return layer_normalize(v, p(prefix + name + ".gain"), p(prefix + name + ".bias"));
  };
  x = add(x, attention(p, norm(x, "norm_t"), b, Axis::Time));
  x = add(x, attention(p, norm(x, "norm_h"), b, Axis::Height));
  x = add(x, attention(p, norm(x, "norm_w"), b, Axis::Width));
  Var<Real> h = norm(x, "norm_mlp");
  h = gelu(add_bias(matmul(h, p(prefix + "mlp.fc1.weight")), p(prefix + "mlp.fc1.bias")));
  h = add_bias(matmul(h, p(prefix + "mlp.fc2.weight")), p(prefix + "mlp.fc2.bias"));
  x = add(x, h);
  return feature_frequency_scale(x, p(prefix + "theta.low"), p(prefix + "theta.high"));
}

template <typename Real>
Var<Real> Bubbleformer<Real>::reconstruct(const BoundParameters<Real>& p, Var<Real> tokens) const {
  if (tokens.shape().size() != 4 || tokens.shape()[3] != cfg_.embed_dim) {
    throw ShapeError("reconstruct expects tokens [T, Hp, Wp, E], got " + shape_string(tokens.shape()));
  }
  const std::size_t n = cfg_.stages();
  Var<Real> x = permute(tokens, {0, 3, 1, 2});
  for (std::size_t r = 0; r < n; ++r) {
    const std::string name = "reconstruct." + std::to_string(r);
    x = add_channel_bias(transposed_patch_conv(x, p(name + ".conv")), p(name + ".bias"));
    if (r + 1 < n) {
      x = permute(x, {0, 2, 3, 1});
      x = gelu(layer_normalize(x, p(name + ".norm.gain"), p(name + ".norm.bias")));
      x = permute(x, {0, 3, 1, 2});
    }
  }
  return x;
}

template <typename Real>
Var<Real> Bubbleformer<Real>::forward(const BoundParameters<Real>& p, Var<Real> frames,
                                      const FluidDescriptor& fd) const {
  Var<Real> x = film(p, embed(p, frames), fd);
  for (std::size_t b = 0; b < cfg_.num_blocks; ++b) x = block(p, x, b);
  return reconstruct(p, x);
}

template <typename Real>
Tensor<Real> Bubbleformer<Real>::predict(const Tensor<Real>& frames, const FluidDescriptor& fd) const {
  Tape<Real> tape(false);
  const auto p = bind(tape);
  return forward(p, tape.constant(frames), fd).value();
}

template class Bubbleformer<float>;
template class Bubbleformer<double>;

}  // namespace bubbleformer
