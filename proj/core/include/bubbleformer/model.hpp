#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "bubbleformer/descriptor.hpp"
#include "bubbleformer/model_config.hpp"
#include "bubbleformer/ops.hpp"
#include "bubbleformer/parameters.hpp"

namespace bubbleformer {

enum class Axis { Time, Height, Width };

/// Bidirectional T5 bucket of the offset `key - query`.
int relative_position_bucket(long offset, int num_buckets = 32, int max_distance = 128);

/// Row-major [length * length] bucket map for one axis.
std::vector<int> relative_bucket_map(std::size_t length, int num_buckets = 32, int max_distance = 128);

/// Parameters placed on a tape, addressable by registry name.
template <typename Real>
class BoundParameters {
 public:
  BoundParameters(const ParameterStore<Real>& store, std::vector<Var<Real>> vars)
      : store_(&store), vars_(std::move(vars)) {}

  Var<Real> operator()(std::string_view name) const { return vars_[store_->index(name)]; }
  const std::vector<Var<Real>>& vars() const noexcept { return vars_; }

 private:
  const ParameterStore<Real>* store_;
  std::vector<Var<Real>> vars_;
};

template <typename Real>
class Bubbleformer {
 public:
  /// Seeded initialization: truncated normals for weights, zeros for biases,
  /// ones for norm gains and frequency scales, FiLM starts as the identity on gamma.
  Bubbleformer(ModelConfig cfg, std::uint64_t seed);
  Bubbleformer(ModelConfig cfg, ParameterStore<Real> params);

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterStore<Real>& parameters() noexcept { return params_; }
  const ParameterStore<Real>& parameters() const noexcept { return params_; }

  /// Every parameter becomes a leaf that requires grad when the tape records.
  BoundParameters<Real> bind(Tape<Real>& tape) const;

  /// frames[T, 4, H, W] -> tokens[T, H/p, W/p, E]
  Var<Real> embed(const BoundParameters<Real>& p, Var<Real> frames) const;
  Var<Real> film(const BoundParameters<Real>& p, Var<Real> tokens, const FluidDescriptor& fd) const;
  Var<Real> attention(const BoundParameters<Real>& p, Var<Real> tokens, std::size_t block, Axis axis) const;
  Var<Real> block(const BoundParameters<Real>& p, Var<Real> tokens, std::size_t block) const;
  /// tokens[T, Hp, Wp, E] -> frames[T, 4, Hp*p, Wp*p]
  Var<Real> reconstruct(const BoundParameters<Real>& p, Var<Real> tokens) const;

  Var<Real> forward(const BoundParameters<Real>& p, Var<Real> frames, const FluidDescriptor& fd) const;

  /// Inference on a non-recording tape.
  Tensor<Real> predict(const Tensor<Real>& frames, const FluidDescriptor& fd) const;

 private:
  void check_frames(const Shape& s) const;

  ModelConfig cfg_;
  ParameterStore<Real> params_;
};

extern template class Bubbleformer<float>;
extern template class Bubbleformer<double>;

}  // namespace bubbleformer
