#pragma once

// Randomized gradient checks for every tape primitive, used by the unit
// suite and by the acceptance binary.

#include <functional>
#include <string>
#include <vector>

#include "fd_oracle.hpp"
#include "lolab/rng.hpp"
#include "lolab/tape.hpp"

namespace lolab::testing {

struct PrimitiveCase {
  std::string name;
  std::function<std::vector<Tensor>(RngStream&)> make_inputs;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

inline Tensor randn(Shape s, RngStream& r, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.raw()) v = r.normal(0.0, scale);
  return t;
}

/// Entries with |x| >= margin, keeping finite differences off the kinks.
inline Tensor randn_away_from_zero(Shape s, RngStream& r, double margin) {
  Tensor t(std::move(s));
  for (double& v : t.raw()) {
    do v = r.normal(0.0, 1.0);
    while (std::abs(v) < margin);
  }
  return t;
}

/// Scalar root sum(y * W) with W fixed by seed, so every output entry matters.
inline Var project(Var y, std::uint64_t seed) {
  RngStream r(seed);
  Tensor w = randn(y.shape(), r);
  return sum(mul(y, y.tape->constant(std::move(w))));
}

inline std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> c;
  auto unary = [&](std::string name, std::function<Var(Var)> op, double margin = 0.0) {
    c.push_back({name,
                 [margin](RngStream& r) {
                   return std::vector<Tensor>{margin > 0 ? randn_away_from_zero({3, 4}, r, margin) : randn({3, 4}, r)};
                 },
                 [op](Tape&, const std::vector<Var>& v) { return project(op(v[0]), 11); }});
  };
  c.push_back({"add", [](RngStream& r) { return std::vector<Tensor>{randn({3, 4}, r), randn({3, 4}, r)}; },
               [](Tape&, const std::vector<Var>& v) { return project(add(v[0], v[1]), 1); }});
  c.push_back({"add_broadcast", [](RngStream& r) { return std::vector<Tensor>{randn({5, 3}, r), randn({3}, r)}; },
               [](Tape&, const std::vector<Var>& v) { return project(add(v[0], v[1]), 2); }});
  c.push_back({"sub", [](RngStream& r) { return std::vector<Tensor>{randn({2, 5}, r), randn({2, 5}, r)}; },
               [](Tape&, const std::vector<Var>& v) { return project(sub(v[0], v[1]), 3); }});
  c.push_back({"mul", [](RngStream& r) { return std::vector<Tensor>{randn({4, 3}, r), randn({4, 3}, r)}; },
               [](Tape&, const std::vector<Var>& v) { return project(mul(v[0], v[1]), 4); }});
  c.push_back({"matmul", [](RngStream& r) { return std::vector<Tensor>{randn({3, 4}, r), randn({4, 2}, r)}; },
               [](Tape&, const std::vector<Var>& v) { return project(matmul(v[0], v[1]), 5); }});
  unary("sigmoid", [](Var x) { return sigmoid(x); });
  unary("tanh", [](Var x) { return tanh(x); });
  unary("relu", [](Var x) { return relu(x); }, 1e-3);
  unary("sign", [](Var x) { return sign(x); }, 1e-3);
  unary("log_abs", [](Var x) { return log_abs(x); }, 0.1);
  unary("scale", [](Var x) { return scale(x, -2.5); });
  unary("reshape", [](Var x) { return reshape(x, {2, 6}); });
  unary("slice", [](Var x) { return slice(x, 1, 3); });
  unary("sum", [](Var x) { return sum(x); });
  unary("l2_norm", [](Var x) { return l2_norm(x); });
  c.push_back({"concat",
               [](RngStream& r) { return std::vector<Tensor>{randn({3, 2}, r), randn({3, 1}, r), randn({3, 3}, r)}; },
               [](Tape&, const std::vector<Var>& v) { return project(concat({v[0], v[1], v[2]}), 6); }});
  c.push_back({"mse", [](RngStream& r) { return std::vector<Tensor>{randn({4, 2}, r), randn({4, 2}, r)}; },
               [](Tape&, const std::vector<Var>& v) { return scale(mse(v[0], v[1]), 1.0); }});
  c.push_back({"softmax_xent", [](RngStream& r) { return std::vector<Tensor>{randn({5, 4}, r, 2.0)}; },
               [](Tape&, const std::vector<Var>& v) {
                 return softmax_xent(v[0], std::vector<std::size_t>{0, 3, 1, 2, 3});
               }});
  c.push_back({"conv2d",
               [](RngStream& r) {
                 return std::vector<Tensor>{randn({2, 2, 5, 5}, r), randn({3, 2, 3, 3}, r), randn({3}, r)};
               },
               [](Tape&, const std::vector<Var>& v) { return project(conv2d(v[0], v[1], &v[2], 1, 0), 7); }});
  c.push_back({"conv2d_stride_pad",
               [](RngStream& r) {
                 return std::vector<Tensor>{randn({1, 2, 6, 5}, r), randn({2, 2, 3, 2}, r), randn({2}, r)};
               },
               [](Tape&, const std::vector<Var>& v) { return project(conv2d(v[0], v[1], &v[2], 2, 1), 8); }});
  c.push_back({"maxpool2d", [](RngStream& r) { return std::vector<Tensor>{randn({2, 2, 4, 6}, r)}; },
               [](Tape&, const std::vector<Var>& v) { return project(maxpool2d(v[0], 2, 2), 9); }});
  return c;
}

struct CaseOutcome {
  std::size_t trials = 0;
  std::size_t failures = 0;
  double worst_rel = 0.0;  // among entries above the absolute floor
  double worst_abs = 0.0;
};

/// Analytic gradient vs central differences (step 1e-5) over `trials` random
/// instances; tolerance rel 1e-4 with an absolute floor of 1e-7.
inline CaseOutcome check_case(const PrimitiveCase& pc, std::size_t trials, std::uint64_t seed) {
  CaseOutcome out;
  RngStream rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto inputs = pc.make_inputs(rng);
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    Var root = pc.build(tape, vars);
    const Gradients g = tape.backward(root);
    ForwardFn f = [&](const std::vector<Tensor>& xs) {
      Tape t2;
      std::vector<Var> v2;
      for (const auto& x : xs) v2.push_back(t2.constant(x));
      return pc.build(t2, v2).item();
    };
    const auto numeric = central_difference(f, inputs, 1e-5);
    bool ok = true;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const Tensor a = g.wrt(vars[k]);
      for (std::size_t i = 0; i < a.size(); ++i) {
        ok = ok && close(a[i], numeric[k][i], 1e-4, 1e-7);
        out.worst_abs = std::max(out.worst_abs, std::abs(a[i] - numeric[k][i]));
      }
      out.worst_rel = std::max(out.worst_rel, worst_rel(a, numeric[k], 1e-7));
    }
    ++out.trials;
    if (!ok) ++out.failures;
  }
  return out;
}

}  // namespace lolab::testing
