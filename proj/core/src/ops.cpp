#include "bubbleformer/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

namespace bubbleformer {

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace {

thread_local MacCounts* g_active_counts = nullptr;

void count_matmul(std::uint64_t macs) {
  if (g_active_counts) g_active_counts->matmul += macs;
}

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMapMat = Eigen::Map<const RowMat<Real>>;

template <typename Real>
ConstMapMat<Real> as_matrix(const Real* p, std::size_t rows, std::size_t cols) {
  return ConstMapMat<Real>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename Real>
MapMat<Real> as_matrix(Real* p, std::size_t rows, std::size_t cols) {
  return MapMat<Real>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

template <typename Real>
void require_scalar(Var<Real> s, const char* op) {
  if (s.value().size() != 1) throw ShapeError(std::string(op) + ": expected a scalar parameter");
}

Shape leading(const Shape& s, std::size_t drop) {
  return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(drop));
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
};

ConvGeometry conv_geometry(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_string(s));
}

}  // namespace

MacScope::MacScope(MacCounts& counts) : previous_(g_active_counts) { g_active_counts = &counts; }
MacScope::~MacScope() { g_active_counts = previous_; }
MacCounts* active_mac_counts() { return g_active_counts; }

// ---------------------------------------------------------------- elementwise

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().push("add", std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().push("sub", std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().push("mul", std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, int self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename Real>
Var<Real> scale(Var<Real> a, Real factor) {
  Tensor<Real> out = a.value();
  for (auto& v : out.data()) v *= factor;
  const int ia = a.id();
  return a.tape().push("scale", std::move(out), {ia}, [ia, factor](Tape<Real>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename Real>
Var<Real> add_bias(Var<Real> x, Var<Real> bias) {
  const std::size_t c = x.value().extent(-1);
  if (bias.value().size() != c) throw ShapeError("add_bias: bias length must equal channel extent");
  Tensor<Real> out = x.value();
  const auto& b = bias.value();
  const std::size_t rows = out.size() / c;
  for (std::size_t r = 0; r < rows; ++r) {
    Real* row = out.raw() + r * c;
    for (std::size_t j = 0; j < c; ++j) row[j] += b[j];
  }
  const int ix = x.id(), ib = bias.id();
  return x.tape().push("add_bias", std::move(out), {ix, ib}, [ix, ib, c, rows](Tape<Real>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ix)) {
      auto& gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
  });
}

template <typename Real>
Var<Real> add_channel_bias(Var<Real> x, Var<Real> bias) {
  const ConvGeometry geo = conv_geometry(x.shape(), "add_channel_bias");
  if (bias.value().size() != geo.channels) {
    throw ShapeError("add_channel_bias: bias length must equal channel extent");
  }
  const std::size_t plane = geo.height * geo.width, c = geo.channels;
  Tensor<Real> out = x.value();
  const Real* b = bias.value().raw();
  for (std::size_t n = 0; n < geo.batch; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      Real* p = out.raw() + (n * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += b[ch];
    }
  const int ix = x.id(), ib = bias.id();
  return x.tape().push("add_channel_bias", std::move(out), {ix, ib},
                       [ix, ib, geo, plane, c](Tape<Real>& t, int self) {
                         const auto& g = t.grad(self);
                         if (t.requires_grad(ix)) {
                           auto& gx = t.grad_buffer(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         }
                         if (t.requires_grad(ib)) {
                           Real* gb = t.grad_buffer(ib).raw();
                           for (std::size_t n = 0; n < geo.batch; ++n)
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               const Real* p = g.raw() + (n * c + ch) * plane;
                               Real acc = 0;
                               for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                               gb[ch] += acc;
                             }
                         }
                       });
}

template <typename Real>
Var<Real> mul_scalar(Var<Real> x, Var<Real> s) {
  require_scalar(s, "mul_scalar");
  const Real k = s.value()[0];
  Tensor<Real> out = x.value();
  for (auto& v : out.data()) v *= k;
  const int ix = x.id(), is = s.id();
  return x.tape().push("mul_scalar", std::move(out), {ix, is}, [ix, is](Tape<Real>& t, int self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(ix);
    const Real k = t.value(is)[0];
    if (t.requires_grad(ix)) {
      auto& gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * k;
    }
    if (t.requires_grad(is)) {
      Real acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.grad_buffer(is)[0] += acc;
    }
  });
}

// --------------------------------------------------------------------- matmul

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) throw ShapeError("matmul: operands need rank >= 2");
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) {
    throw ShapeError("matmul: inner extents differ " + shape_string(sa) + " x " + shape_string(sb));
  }
  const Shape lead_a = leading(sa, 2), lead_b = leading(sb, 2);
  const std::size_t batch_a = shape_volume(lead_a), batch_b = shape_volume(lead_b);

  // Modes: shared right operand, shared left operand, or matching batches.
  enum class Mode { SharedB, SharedA, Paired };
  Mode mode;
  Shape out_shape;
  if (batch_b == 1 && sb.size() == 2) {
    mode = Mode::SharedB;
    out_shape = lead_a;
  } else if (batch_a == 1 && sa.size() == 2) {
    mode = Mode::SharedA;
    out_shape = lead_b;
  } else if (lead_a == lead_b) {
    mode = Mode::Paired;
    out_shape = lead_a;
  } else {
    throw ShapeError("matmul: batch extents not broadcastable " + shape_string(sa) + " x " +
                     shape_string(sb));
  }
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::size_t batch = mode == Mode::SharedA ? batch_b : batch_a;

  Tensor<Real> out(out_shape);
  const Real* pa = a.value().raw();
  const Real* pb = b.value().raw();
  Real* po = out.raw();
  if (mode == Mode::SharedB) {
    as_matrix(po, batch * m, n).noalias() = as_matrix(pa, batch * m, k) * as_matrix(pb, k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      const Real* ai = mode == Mode::SharedA ? pa : pa + i * m * k;
      const Real* bi = pb + i * k * n;
      as_matrix(po + i * m * n, m, n).noalias() = as_matrix(ai, m, k) * as_matrix(bi, k, n);
    }
  }
  count_matmul(static_cast<std::uint64_t>(batch) * m * k * n);

  const int ia = a.id(), ib = b.id();
  return a.tape().push(
      "matmul", std::move(out), {ia, ib}, [ia, ib, mode, batch, m, k, n](Tape<Real>& t, int self) {
        const Real* g = t.grad(self).raw();
        const Real* av = t.value(ia).raw();
        const Real* bv = t.value(ib).raw();
        const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
        if (mode == Mode::SharedB) {
          if (need_a) {
            as_matrix(t.grad_buffer(ia).raw(), batch * m, k).noalias() +=
                as_matrix(g, batch * m, n) * as_matrix(bv, k, n).transpose();
          }
          if (need_b) {
            as_matrix(t.grad_buffer(ib).raw(), k, n).noalias() +=
                as_matrix(av, batch * m, k).transpose() * as_matrix(g, batch * m, n);
          }
          return;
        }
        for (std::size_t i = 0; i < batch; ++i) {
          const bool shared_a = mode == Mode::SharedA;
          const Real* ai = shared_a ? av : av + i * m * k;
          const Real* bi = bv + i * k * n;
          const Real* gi = g + i * m * n;
          if (need_a) {
            Real* ga = t.grad_buffer(ia).raw() + (shared_a ? 0 : i * m * k);
            as_matrix(ga, m, k).noalias() += as_matrix(gi, m, n) * as_matrix(bi, k, n).transpose();
          }
          if (need_b) {
            Real* gb = t.grad_buffer(ib).raw() + i * k * n;
            as_matrix(gb, k, n).noalias() += as_matrix(ai, m, k).transpose() * as_matrix(gi, m, n);
          }
        }
      });
}

// ------------------------------------------------------------------ layout ops

namespace {

// out[perm-index] = in[index]; `axes[d]` is the input axis placed at output axis d.
template <typename Real>
void permute_copy(const Real* in, const Shape& in_shape, const std::vector<std::size_t>& axes,
                  Real* out, bool accumulate_into_input, const Real* grad_out, Real* grad_in) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
  std::vector<std::size_t> out_shape(r), stride(r);
  for (std::size_t d = 0; d < r; ++d) {
    out_shape[d] = in_shape[axes[d]];
    stride[d] = in_strides[axes[d]];
  }
  const std::size_t total = shape_volume(in_shape);
  // Innermost output axis handled as a strided run.
  const std::size_t inner = out_shape[r - 1];
  const std::size_t inner_stride = stride[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    if (accumulate_into_input) {
      for (std::size_t j = 0; j < inner; ++j) grad_in[src + j * inner_stride] += grad_out[o + j];
    } else {
      for (std::size_t j = 0; j < inner; ++j) out[o + j] = in[src + j * inner_stride];
    }
    // advance the outer multi-index (axes 0..r-2)
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      src += stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

template <typename Real>
Var<Real> permute(Var<Real> a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  if (axes.size() != s.size()) throw ShapeError("permute: axes rank mismatch");
  std::vector<bool> seen(s.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= s.size() || seen[ax]) throw ShapeError("permute: invalid axes");
    seen[ax] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) out_shape[d] = s[axes[d]];
  Tensor<Real> out(out_shape);
  permute_copy<Real>(a.value().raw(), s, axes, out.raw(), false, nullptr, nullptr);
  const int ia = a.id();
  const Shape in_shape = s;
  return a.tape().push("permute", std::move(out), {ia}, [ia, in_shape, axes](Tape<Real>& t, int self) {
    permute_copy<Real>(nullptr, in_shape, axes, nullptr, true, t.grad(self).raw(),
                       t.grad_buffer(ia).raw());
  });
}

template <typename Real>
Var<Real> transpose_last2(Var<Real> a) {
  const std::size_t r = a.shape().size();
  if (r < 2) throw ShapeError("transpose_last2: rank < 2");
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

template <typename Real>
Var<Real> reshape(Var<Real> a, Shape shape) {
  Tensor<Real> out = a.value().reshaped(std::move(shape));
  const int ia = a.id();
  return a.tape().push("reshape", std::move(out), {ia}, [ia](Tape<Real>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename Real>
Var<Real> slice_lastdim(Var<Real> a, std::size_t start, std::size_t length) {
  const std::size_t c = a.value().extent(-1);
  if (length == 0 || start + length > c) throw ShapeError("slice_lastdim: range out of bounds");
  Shape out_shape = a.shape();
  out_shape.back() = length;
  Tensor<Real> out(out_shape);
  const std::size_t rows = a.value().size() / c;
  const Real* src = a.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(src + r * c + start, length, out.raw() + r * length);
  }
  const int ia = a.id();
  return a.tape().push("slice_lastdim", std::move(out), {ia},
                       [ia, rows, c, start, length](Tape<Real>& t, int self) {
                         const Real* g = t.grad(self).raw();
                         Real* ga = t.grad_buffer(ia).raw();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < length; ++j)
                             ga[r * c + start + j] += g[r * length + j];
                       });
}

// ---------------------------------------------------------------- activations

template <typename Real>
Var<Real> softmax_lastdim(Var<Real> x) {
  const std::size_t c = x.value().extent(-1);
  Tensor<Real> out = x.value();
  const std::size_t rows = out.size() / c;
  for (std::size_t r = 0; r < rows; ++r) {
    Real* row = out.raw() + r * c;
    const Real mx = *std::max_element(row, row + c);
    Real s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
  const int ix = x.id();
  return x.tape().push("softmax", std::move(out), {ix}, [ix, c, rows](Tape<Real>& t, int self) {
    const Real* y = t.value(self).raw();
    const Real* g = t.grad(self).raw();
    Real* gx = t.grad_buffer(ix).raw();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = y + r * c;
      const Real* gr = g + r * c;
      Real d = 0;
      for (std::size_t j = 0; j < c; ++j) d += gr[j] * yr[j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += yr[j] * (gr[j] - d);
    }
  });
}

template <typename Real>
Var<Real> gelu(Var<Real> x) {
  constexpr Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  Tensor<Real> out = x.value();
  for (auto& v : out.data()) v = v * Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
  const int ix = x.id();
  return x.tape().push("gelu", std::move(out), {ix}, [ix](Tape<Real>& t, int self) {
    constexpr Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
    const Real inv_sqrt2pi = Real(1) / std::sqrt(Real(2) * std::numbers::pi_v<Real>);
    const auto& xv = t.value(ix);
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = xv[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
      const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

template <typename Real>
Var<Real> layer_normalize(Var<Real> x, Var<Real> gain, Var<Real> bias) {
  const std::size_t c = x.value().extent(-1);
  if (gain.value().size() != c || bias.value().size() != c) {
    throw ShapeError("layer_normalize: gain/bias length must equal channel extent " +
                     std::to_string(c));
  }
  const std::size_t rows = x.value().size() / c;
  Tensor<Real> out(x.shape());
  // Saved per-row statistics for the backward pass.
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  const Real* xv = x.value().raw();
  const Real* gv = gain.value().raw();
  const Real* bv = bias.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xv + r * c;
    Real mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= Real(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= Real(c);
    const Real is = Real(1) / std::sqrt(var + Real(kLayerNormEpsilon));
    (*inv_std)[r] = is;
    Real* o = out.raw() + r * c;
    for (std::size_t j = 0; j < c; ++j) o[j] = (row[j] - mu) * is * gv[j] + bv[j];
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().push(
      "layer_normalize", std::move(out), {ix, ig, ib},
      [ix, ig, ib, c, rows, inv_std](Tape<Real>& t, int self) {
        const Real* xv = t.value(ix).raw();
        const Real* gv = t.value(ig).raw();
        const Real* g = t.grad(self).raw();
        const bool nx = t.requires_grad(ix), ng = t.requires_grad(ig), nb = t.requires_grad(ib);
        Real* gx = nx ? t.grad_buffer(ix).raw() : nullptr;
        Real* gg = ng ? t.grad_buffer(ig).raw() : nullptr;
        Real* gb = nb ? t.grad_buffer(ib).raw() : nullptr;
        std::vector<Real> xhat(c), dxhat(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* row = xv + r * c;
          const Real* gr = g + r * c;
          Real mu = 0;
          for (std::size_t j = 0; j < c; ++j) mu += row[j];
          mu /= Real(c);
          const Real is = (*inv_std)[r];
          Real m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (row[j] - mu) * is;
            dxhat[j] = gr[j] * gv[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
            if (gg) gg[j] += gr[j] * xhat[j];
            if (gb) gb[j] += gr[j];
          }
          if (gx) {
            m1 /= Real(c);
            m2 /= Real(c);
            for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += is * (dxhat[j] - m1 - xhat[j] * m2);
          }
        }
      });
}

// ---------------------------------------------------------------- convolution

template <typename Real>
Var<Real> strided_patch_conv(Var<Real> x, Var<Real> kernel) {
  const ConvGeometry geo = conv_geometry(x.shape(), "strided_patch_conv");
  const Shape& ks = kernel.shape();
  if (ks.size() != 4 || ks[1] != geo.channels || ks[2] != 2 || ks[3] != 2) {
    throw ShapeError("strided_patch_conv: kernel must be [Co," + std::to_string(geo.channels) +
                     ",2,2], got " + shape_string(ks));
  }
  if (geo.height % 2 != 0 || geo.width % 2 != 0) {
    throw ShapeError("strided_patch_conv: spatial extents must be even, got " +
                     shape_string(x.shape()));
  }
  const std::size_t co = ks[0], c = geo.channels;
  const std::size_t ho = geo.height / 2, wo = geo.width / 2, w = geo.width;
  const std::size_t cols = ho * wo, depth = c * 4;
  Shape out_shape = x.shape().size() == 3 ? Shape{co, ho, wo} : Shape{geo.batch, co, ho, wo};
  Tensor<Real> out(out_shape);

  auto gather = [=](const Real* xn, Real* patches) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) {
          Real* prow = patches + (ch * 4 + a * 2 + b) * cols;
          const Real* src = xn + ch * geo.height * w + a * w + b;
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) prow[i * wo + j] = src[2 * i * w + 2 * j];
        }
  };
  std::vector<Real> patches(depth * cols);
  const Real* kv = kernel.value().raw();
  for (std::size_t n = 0; n < geo.batch; ++n) {
    gather(x.value().raw() + n * c * geo.height * w, patches.data());
    as_matrix(out.raw() + n * co * cols, co, cols).noalias() =
        as_matrix(kv, co, depth) * as_matrix(patches.data(), depth, cols);
  }
  count_matmul(static_cast<std::uint64_t>(geo.batch) * co * depth * cols);

  const int ix = x.id(), ik = kernel.id();
  return x.tape().push(
      "strided_patch_conv", std::move(out), {ix, ik},
      [ix, ik, geo, co, c, ho, wo, w, cols, depth, gather](Tape<Real>& t, int self) {
        const Real* g = t.grad(self).raw();
        const Real* kv = t.value(ik).raw();
        const bool nx = t.requires_grad(ix), nk = t.requires_grad(ik);
        std::vector<Real> patches(depth * cols), dpatches(depth * cols);
        for (std::size_t n = 0; n < geo.batch; ++n) {
          const Real* gn = g + n * co * cols;
          if (nk) {
            gather(t.value(ix).raw() + n * c * geo.height * w, patches.data());
            as_matrix(t.grad_buffer(ik).raw(), co, depth).noalias() +=
                as_matrix(gn, co, cols) * as_matrix(patches.data(), depth, cols).transpose();
          }
          if (nx) {
            as_matrix(dpatches.data(), depth, cols).noalias() =
                as_matrix(kv, co, depth).transpose() * as_matrix(gn, co, cols);
            Real* gx = t.grad_buffer(ix).raw() + n * c * geo.height * w;
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b) {
                  const Real* prow = dpatches.data() + (ch * 4 + a * 2 + b) * cols;
                  Real* dst = gx + ch * geo.height * w + a * w + b;
                  for (std::size_t i = 0; i < ho; ++i)
                    for (std::size_t j = 0; j < wo; ++j) dst[2 * i * w + 2 * j] += prow[i * wo + j];
                }
          }
        }
      });
}

template <typename Real>
Var<Real> transposed_patch_conv(Var<Real> x, Var<Real> kernel) {
  const ConvGeometry geo = conv_geometry(x.shape(), "transposed_patch_conv");
  const Shape& ks = kernel.shape();
  if (ks.size() != 4 || ks[0] != geo.channels || ks[2] != 2 || ks[3] != 2) {
    throw ShapeError("transposed_patch_conv: kernel must be [" + std::to_string(geo.channels) +
                     ",Co,2,2], got " + shape_string(ks));
  }
  const std::size_t c = geo.channels, co = ks[1];
  const std::size_t h = geo.height, w = geo.width, cols = h * w, depth = co * 4;
  const std::size_t ho = 2 * h, wo = 2 * w;
  Shape out_shape = x.shape().size() == 3 ? Shape{co, ho, wo} : Shape{geo.batch, co, ho, wo};
  Tensor<Real> out(out_shape);

  std::vector<Real> patches(depth * cols);
  const Real* kv = kernel.value().raw();
  for (std::size_t n = 0; n < geo.batch; ++n) {
    as_matrix(patches.data(), depth, cols).noalias() =
        as_matrix(kv, c, depth).transpose() * as_matrix(x.value().raw() + n * c * cols, c, cols);
    Real* on = out.raw() + n * co * ho * wo;
    for (std::size_t ch = 0; ch < co; ++ch)
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) {
          const Real* prow = patches.data() + (ch * 4 + a * 2 + b) * cols;
          Real* dst = on + ch * ho * wo + a * wo + b;
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) dst[2 * i * wo + 2 * j] = prow[i * w + j];
        }
  }
  count_matmul(static_cast<std::uint64_t>(geo.batch) * c * depth * cols);

  const int ix = x.id(), ik = kernel.id();
  return x.tape().push(
      "transposed_patch_conv", std::move(out), {ix, ik},
      [ix, ik, geo, c, co, h, w, cols, depth, ho, wo](Tape<Real>& t, int self) {
        const Real* g = t.grad(self).raw();
        const Real* kv = t.value(ik).raw();
        const bool nx = t.requires_grad(ix), nk = t.requires_grad(ik);
        std::vector<Real> gp(depth * cols);
        for (std::size_t n = 0; n < geo.batch; ++n) {
          const Real* gn = g + n * co * ho * wo;
          for (std::size_t ch = 0; ch < co; ++ch)
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t b = 0; b < 2; ++b) {
                Real* prow = gp.data() + (ch * 4 + a * 2 + b) * cols;
                const Real* src = gn + ch * ho * wo + a * wo + b;
                for (std::size_t i = 0; i < h; ++i)
                  for (std::size_t j = 0; j < w; ++j) prow[i * w + j] = src[2 * i * wo + 2 * j];
              }
          if (nx) {
            as_matrix(t.grad_buffer(ix).raw() + n * c * cols, c, cols).noalias() +=
                as_matrix(kv, c, depth) * as_matrix(gp.data(), depth, cols);
          }
          if (nk) {
            as_matrix(t.grad_buffer(ik).raw(), c, depth).noalias() +=
                as_matrix(t.value(ix).raw() + n * c * cols, c, cols) *
                as_matrix(gp.data(), depth, cols).transpose();
          }
        }
      });
}

// ----------------------------------------------------------------- reductions

template <typename Real>
Var<Real> sum(Var<Real> x) {
  Real s = 0;
  for (Real v : x.value().data()) s += v;
  const int ix = x.id();
  return x.tape().push("sum", Tensor<Real>::scalar(s), {ix}, [ix](Tape<Real>& t, int self) {
    const Real g = t.grad(self)[0];
    for (auto& v : t.grad_buffer(ix).data()) v += g;
  });
}

template <typename Real>
Var<Real> mean(Var<Real> x) {
  return scale(sum(x), Real(1) / Real(x.value().size()));
}

// ------------------------------------------------------ conditioning & scaling

template <typename Real>
Var<Real> channel_affine(Var<Real> x, Var<Real> gamma, Var<Real> beta) {
  const std::size_t c = x.value().extent(-1);
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("channel_affine: gamma/beta length must equal channel extent");
  }
  const std::size_t rows = x.value().size() / c;
  Tensor<Real> out = x.value();
  const Real* gv = gamma.value().raw();
  const Real* bv = beta.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    Real* row = out.raw() + r * c;
    for (std::size_t j = 0; j < c; ++j) row[j] = row[j] * gv[j] + bv[j];
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().push("channel_affine", std::move(out), {ix, ig, ib},
                       [ix, ig, ib, c, rows](Tape<Real>& t, int self) {
                         const Real* g = t.grad(self).raw();
                         const Real* xv = t.value(ix).raw();
                         const Real* gv = t.value(ig).raw();
                         Real* gx = t.requires_grad(ix) ? t.grad_buffer(ix).raw() : nullptr;
                         Real* gg = t.requires_grad(ig) ? t.grad_buffer(ig).raw() : nullptr;
                         Real* gb = t.requires_grad(ib) ? t.grad_buffer(ib).raw() : nullptr;
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < c; ++j) {
                             const std::size_t i = r * c + j;
                             if (gx) gx[i] += g[i] * gv[j];
                             if (gg) gg[j] += g[i] * xv[i];
                             if (gb) gb[j] += g[i];
                           }
                       });
}

template <typename Real>
Var<Real> add_relative_bias(Var<Real> scores, Var<Real> table, const std::vector<int>& buckets) {
  const Shape& s = scores.shape();
  if (s.size() < 3) throw ShapeError("add_relative_bias: scores need [.., heads, L, L]");
  const std::size_t len = s.back(), heads = s[s.size() - 3];
  if (s[s.size() - 2] != len) throw ShapeError("add_relative_bias: scores must be square");
  if (buckets.size() != len * len) throw ShapeError("add_relative_bias: bucket map size mismatch");
  const Shape& ts = table.shape();
  if (ts.size() != 2 || ts[1] != heads) throw ShapeError("add_relative_bias: table must be [buckets, heads]");
  const std::size_t nb = ts[0];
  for (int b : buckets) {
    if (b < 0 || static_cast<std::size_t>(b) >= nb) throw ShapeError("add_relative_bias: bucket out of range");
  }
  const std::size_t outer = scores.value().size() / (heads * len * len);
  Tensor<Real> out = scores.value();
  const Real* tv = table.value().raw();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t h = 0; h < heads; ++h) {
      Real* blk = out.raw() + (o * heads + h) * len * len;
      for (std::size_t q = 0; q < len * len; ++q) blk[q] += tv[static_cast<std::size_t>(buckets[q]) * heads + h];
    }
  const int is = scores.id(), it = table.id();
  return scores.tape().push(
      "add_relative_bias", std::move(out), {is, it},
      [is, it, buckets, outer, heads, len](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(is)) {
          auto& gs = t.grad_buffer(is);
          for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
        }
        if (t.requires_grad(it)) {
          Real* gt = t.grad_buffer(it).raw();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t h = 0; h < heads; ++h) {
              const Real* blk = g.raw() + (o * heads + h) * len * len;
              for (std::size_t q = 0; q < len * len; ++q)
                gt[static_cast<std::size_t>(buckets[q]) * heads + h] += blk[q];
            }
        }
      });
}

// Each row is rebuilt as w + (wl - 1) * mean + (wh - 1) * (w - mean) and
// rescaled back to its original row sum, so wl = wh = 1 returns w bit-exactly.
template <typename Real>
Var<Real> attention_frequency_scale(Var<Real> weights, Var<Real> omega_low, Var<Real> omega_high) {
  require_scalar(omega_low, "attention_frequency_scale");
  require_scalar(omega_high, "attention_frequency_scale");
  const std::size_t len = weights.value().extent(-1);
  const std::size_t rows = weights.value().size() / len;
  const Real dl = omega_low.value()[0] - Real(1), dh = omega_high.value()[0] - Real(1);
  constexpr Real guard = Real(1e-8);
  Tensor<Real> out(weights.shape());
  // per row: input sum W and rebuilt sum S
  auto sums = std::make_shared<std::vector<std::pair<Real, Real>>>(rows);
  const Real* wv = weights.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = wv + r * len;
    Real total_in = 0;
    for (std::size_t j = 0; j < len; ++j) total_in += row[j];
    const Real m = total_in / Real(len);
    Real* o = out.raw() + r * len;
    Real total = 0;
    for (std::size_t j = 0; j < len; ++j) {
      o[j] = row[j] + dl * m + dh * (row[j] - m);
      total += o[j];
    }
    (*sums)[r] = {total_in, total};
    if (total < guard) {
      for (std::size_t j = 0; j < len; ++j) o[j] = Real(1) / Real(len);
    } else {
      const Real factor = total_in / total;
      for (std::size_t j = 0; j < len; ++j) o[j] *= factor;
    }
  }
  const int iw = weights.id(), il = omega_low.id(), ih = omega_high.id();
  return weights.tape().push(
      "attention_frequency_scale", std::move(out), {iw, il, ih},
      [iw, il, ih, len, rows, sums](Tape<Real>& t, int self) {
        const Real* wv = t.value(iw).raw();
        const Real* y = t.value(self).raw();
        const Real* g = t.grad(self).raw();
        const Real wl = t.value(il)[0], wh = t.value(ih)[0];
        Real* gw = t.requires_grad(iw) ? t.grad_buffer(iw).raw() : nullptr;
        Real d_low = 0, d_high = 0;
        std::vector<Real> ds(len);
        for (std::size_t r = 0; r < rows; ++r) {
          const auto [total_in, total] = (*sums)[r];
          if (total < guard) continue;  // constant fallback row
          const Real* row = wv + r * len;
          const Real* yr = y + r * len;
          const Real* gr = g + r * len;
          Real gy = 0;
          for (std::size_t j = 0; j < len; ++j) gy += gr[j] * yr[j];
          const Real m = total_in / Real(len);
          Real ds_sum = 0;
          for (std::size_t j = 0; j < len; ++j) {
            ds[j] = (total_in * gr[j] - gy) / total;
            ds_sum += ds[j];
            d_low += ds[j] * m;
            d_high += ds[j] * (row[j] - m);
          }
          if (gw) {
            // includes the dependence of the target row sum on w
            const Real shared = (wl - wh) * ds_sum / Real(len) + gy / total_in;
            for (std::size_t j = 0; j < len; ++j) gw[r * len + j] += wh * ds[j] + shared;
          }
        }
        if (t.requires_grad(il)) t.grad_buffer(il)[0] += d_low;
        if (t.requires_grad(ih)) t.grad_buffer(ih)[0] += d_high;
      });
}

template <typename Real>
Var<Real> feature_frequency_scale(Var<Real> x, Var<Real> theta_low, Var<Real> theta_high) {
  require_scalar(theta_low, "feature_frequency_scale");
  require_scalar(theta_high, "feature_frequency_scale");
  const std::size_t c = x.value().extent(-1);
  const std::size_t positions = x.value().size() / c;
  const Real tl = theta_low.value()[0], th = theta_high.value()[0];
  auto means = std::make_shared<std::vector<Real>>(c, Real(0));
  const Real* xv = x.value().raw();
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t j = 0; j < c; ++j) (*means)[j] += xv[p * c + j];
  for (auto& m : *means) m /= Real(positions);
  Tensor<Real> out(x.shape());
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t j = 0; j < c; ++j) {
      const Real m = (*means)[j];
      out[p * c + j] = xv[p * c + j] + (tl - Real(1)) * m + (th - Real(1)) * (xv[p * c + j] - m);
    }
  const int ix = x.id(), il = theta_low.id(), ih = theta_high.id();
  return x.tape().push(
      "feature_frequency_scale", std::move(out), {ix, il, ih},
      [ix, il, ih, c, positions, means](Tape<Real>& t, int self) {
        const Real* g = t.grad(self).raw();
        const Real* xv = t.value(ix).raw();
        const Real tl = t.value(il)[0], th = t.value(ih)[0];
        std::vector<Real> gsum(c, Real(0));
        Real dl = 0, dh = 0;
        for (std::size_t p = 0; p < positions; ++p)
          for (std::size_t j = 0; j < c; ++j) {
            const Real gi = g[p * c + j];
            gsum[j] += gi;
            dh += gi * (xv[p * c + j] - (*means)[j]);
          }
        for (std::size_t j = 0; j < c; ++j) dl += gsum[j] * (*means)[j];
        if (t.requires_grad(ix)) {
          Real* gx = t.grad_buffer(ix).raw();
          for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t j = 0; j < c; ++j)
              gx[p * c + j] += th * g[p * c + j] + (tl - th) * gsum[j] / Real(positions);
        }
        if (t.requires_grad(il)) t.grad_buffer(il)[0] += dl;
        if (t.requires_grad(ih)) t.grad_buffer(ih)[0] += dh;
      });
}

// ------------------------------------------------------ explicit instantiation

#define BUBBLEFORMER_INSTANTIATE_OPS(Real)                                                       \
  template Var<Real> add(Var<Real>, Var<Real>);                                                  \
  template Var<Real> sub(Var<Real>, Var<Real>);                                                  \
  template Var<Real> mul(Var<Real>, Var<Real>);                                                  \
  template Var<Real> scale(Var<Real>, Real);                                                     \
  template Var<Real> add_bias(Var<Real>, Var<Real>);                                             \
  template Var<Real> add_channel_bias(Var<Real>, Var<Real>);                                     \
  template Var<Real> mul_scalar(Var<Real>, Var<Real>);                                           \
  template Var<Real> matmul(Var<Real>, Var<Real>);                                               \
  template Var<Real> transpose_last2(Var<Real>);                                                 \
  template Var<Real> permute(Var<Real>, const std::vector<std::size_t>&);                        \
  template Var<Real> reshape(Var<Real>, Shape);                                                  \
  template Var<Real> slice_lastdim(Var<Real>, std::size_t, std::size_t);                         \
  template Var<Real> softmax_lastdim(Var<Real>);                                                 \
  template Var<Real> gelu(Var<Real>);                                                            \
  template Var<Real> layer_normalize(Var<Real>, Var<Real>, Var<Real>);                           \
  template Var<Real> strided_patch_conv(Var<Real>, Var<Real>);                                   \
  template Var<Real> transposed_patch_conv(Var<Real>, Var<Real>);                                \
  template Var<Real> sum(Var<Real>);                                                             \
  template Var<Real> mean(Var<Real>);                                                            \
  template Var<Real> channel_affine(Var<Real>, Var<Real>, Var<Real>);                            \
  template Var<Real> add_relative_bias(Var<Real>, Var<Real>, const std::vector<int>&);           \
  template Var<Real> attention_frequency_scale(Var<Real>, Var<Real>, Var<Real>);                 \
  template Var<Real> feature_frequency_scale(Var<Real>, Var<Real>, Var<Real>);

BUBBLEFORMER_INSTANTIATE_OPS(float)
BUBBLEFORMER_INSTANTIATE_OPS(double)

#undef BUBBLEFORMER_INSTANTIATE_OPS

}  // namespace bubbleformer
