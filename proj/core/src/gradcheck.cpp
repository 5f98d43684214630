#include "bubbleformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace bubbleformer {

GradCheckResult finite_difference_check(const std::function<double(const Tensor<double>&)>& f,
                                        const Tensor<double>& x,
                                        const Tensor<double>& analytic_grad, double h) {
  if (analytic_grad.size() != x.size()) throw ShapeError("finite_difference_check: gradient size mismatch");
  GradCheckResult result;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    const double fd = (fp - fm) / (2.0 * h);
    const double ad = analytic_grad[i];
    const double err = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-8});
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

GradCheckResult finite_difference_check(const ScalarGraph& f, const Tensor<double>& x, double h) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    Var<double> leaf = tape.leaf(x, true);
    Var<double> out = f(tape, leaf);
    tape.backward(out);
    analytic = tape.grad(leaf.id()).empty() ? Tensor<double>::zeros(x.shape()) : tape.grad(leaf.id());
  }
  auto value = [&f](const Tensor<double>& p) {
    Tape<double> tape(false);
    return f(tape, tape.leaf(p)).value()[0];
  };
  return finite_difference_check(value, x, analytic, h);
}

}  // namespace bubbleformer
