#pragma once

#include <functional>
#include <optional>

#include "lolab/tensor.hpp"

namespace lolab {

/// Objective returning L(x) and writing dL/dx into grad (resized by callee).
using Objective = std::function<double(const Tensor& x, Tensor& grad)>;

class ZeroGradientError : public Error {
 public:
  using Error::Error;
};

inline Tensor gradient_of(const Objective& f, const Tensor& x) {
  Tensor g;
  f(x, g);
  return g;
}

/// grad ||grad L(x)|| = H g / ||g||, evaluated as the forward-difference
/// Hessian-vector product (grad L(x + r v) - grad L(x)) / r with v = g / ||g||.
/// Default r = 1e-3 * (1 + ||x||). Throws ZeroGradientError when ||g|| == 0.
inline Tensor grad_norm_gradient(const Objective& f, const Tensor& x,
                                 std::optional<double> r = std::nullopt,
                                 const Tensor* grad_at_x = nullptr) {
  const Tensor g = grad_at_x ? *grad_at_x : gradient_of(f, x);
  if (g.shape() != x.shape()) throw ShapeError("objective gradient shape differs from its input");
  const double gn = norm2(g.data());
  if (!(gn > 0.0)) throw ZeroGradientError("gradient norm is zero; no ascent direction");
  const double step = r.value_or(1e-3 * (1.0 + norm2(x.data())));
  if (!(step > 0.0)) throw Error("finite-difference step must be positive");

  Tensor shifted = x;
  axpy(step / gn, g.data(), shifted.data());
  Tensor out = gradient_of(f, shifted);
  axpy(-1.0, g.data(), out.data());
  for (double& v : out.raw()) v /= step;
  return out;
}

}  // namespace lolab
