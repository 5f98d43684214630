#pragma once

#include <cstdint>
#include <vector>

#include "bubbleformer/tape.hpp"

namespace bubbleformer {

/// Multiply-accumulate tallies collected while a MacScope is active.
struct MacCounts {
  std::uint64_t matmul = 0;                  // every matmul, all batch elements
  std::uint64_t attention_mixing = 0;        // QK^T and AV products only
  std::uint64_t attention_per_sequence = 0;  // mixing cost of one sequence per attention call
};

/// Routes MAC counts of the current thread into `counts` for its lifetime.
class MacScope {
 public:
  explicit MacScope(MacCounts& counts);
  ~MacScope();
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  MacCounts* previous_;
};

/// Currently active counter of this thread, or nullptr.
MacCounts* active_mac_counts();

inline constexpr double kLayerNormEpsilon = 1e-5;

// Elementwise, identical shapes.
template <typename Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> sub(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> mul(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> scale(Var<Real> a, Real factor);

/// x[..., C] + bias[C]
template <typename Real> Var<Real> add_bias(Var<Real> x, Var<Real> bias);

/// x[(N,) C, H, W] + bias[C]
template <typename Real> Var<Real> add_channel_bias(Var<Real> x, Var<Real> bias);

/// x * s for a learnable scalar s of shape {1}.
template <typename Real> Var<Real> mul_scalar(Var<Real> x, Var<Real> s);

/// a[..., M, K] x b[..., K, N]. Batch extents must match, or one side is a
/// plain matrix shared by every batch element.
template <typename Real> Var<Real> matmul(Var<Real> a, Var<Real> b);

template <typename Real> Var<Real> transpose_last2(Var<Real> a);
template <typename Real> Var<Real> permute(Var<Real> a, const std::vector<std::size_t>& axes);
template <typename Real> Var<Real> reshape(Var<Real> a, Shape shape);

/// Columns [start, start + length) of the last axis.
template <typename Real> Var<Real> slice_lastdim(Var<Real> a, std::size_t start, std::size_t length);

template <typename Real> Var<Real> softmax_lastdim(Var<Real> x);

/// x * Phi(x) with the exact Gaussian CDF.
template <typename Real> Var<Real> gelu(Var<Real> x);

/// Normalizes over the last axis (biased variance, eps = 1e-5), then gain/bias.
template <typename Real> Var<Real> layer_normalize(Var<Real> x, Var<Real> gain, Var<Real> bias);

/// x[(N,) C, H, W] with kernel[Co, C, 2, 2]: stride-2 non-overlapping windows.
template <typename Real> Var<Real> strided_patch_conv(Var<Real> x, Var<Real> kernel);

/// x[(N,) C, H, W] with kernel[C, Co, 2, 2] -> [(N,) Co, 2H, 2W]; the adjoint of
/// strided_patch_conv for the same kernel tensor.
template <typename Real> Var<Real> transposed_patch_conv(Var<Real> x, Var<Real> kernel);

template <typename Real> Var<Real> sum(Var<Real> x);
template <typename Real> Var<Real> mean(Var<Real> x);

/// x[..., C] * gamma[C] + beta[C]
template <typename Real> Var<Real> channel_affine(Var<Real> x, Var<Real> gamma, Var<Real> beta);

/// scores[B, heads, L, L] + table[bucket(q, k), head]; `buckets` is L*L row-major.
template <typename Real>
Var<Real> add_relative_bias(Var<Real> scores, Var<Real> table, const std::vector<int>& buckets);

/// Rescales the DC (row mean) and residual parts of each attention row by
/// omega_low / omega_high and rescales the row back to its input sum (1 for
/// softmax rows). Rows whose rescaled sum falls below 1e-8 become uniform.
template <typename Real>
Var<Real> attention_frequency_scale(Var<Real> weights, Var<Real> omega_low, Var<Real> omega_high);

/// x[..., C]: theta_low * mean + theta_high * (x - mean), mean taken per channel
/// over every leading position.
template <typename Real>
Var<Real> feature_frequency_scale(Var<Real> x, Var<Real> theta_low, Var<Real> theta_high);

}  // namespace bubbleformer
