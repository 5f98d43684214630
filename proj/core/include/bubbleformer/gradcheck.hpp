#pragma once

#include <functional>

#include "bubbleformer/tape.hpp"

namespace bubbleformer {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
};

/// Builds a scalar from the leaf `x` on the given tape.
using ScalarGraph = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// Compares the tape gradient of `f` at `x` with central differences of step
/// `h`. Per coordinate the error is |ad - fd| / max(|ad|, |fd|, 1e-8).
GradCheckResult finite_difference_check(const ScalarGraph& f, const Tensor<double>& x,
                                        double h = 1e-4);

/// Same comparison for an arbitrary black-box scalar function whose analytic
/// gradient was obtained elsewhere.
GradCheckResult finite_difference_check(const std::function<double(const Tensor<double>&)>& f,
                                        const Tensor<double>& x,
                                        const Tensor<double>& analytic_grad, double h = 1e-4);

}  // namespace bubbleformer
