#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lolab/data.hpp"
#include "lolab/hvp.hpp"
#include "lolab/optimizee.hpp"
#include "lolab/rng.hpp"

namespace lolab {

enum class ProbeKind { MaxLoss, MaxGradNorm };
enum class StepRule { EpsOver10, Eps };
enum class Stage { AtConvergence, AtCompletion };

inline const char* probe_kind_name(ProbeKind k) { return k == ProbeKind::MaxLoss ? "max_loss" : "max_grad_norm"; }
inline const char* stage_name(Stage s) { return s == Stage::AtConvergence ? "at_convergence" : "at_completion"; }

struct ProbeConfig {
  std::vector<double> radii{0.001, 0.005, 0.01, 0.05, 0.1};
  std::size_t steps = 10;
  StepRule loss_step_rule = StepRule::EpsOver10;
  StepRule grad_norm_step_rule = StepRule::Eps;
  double init_noise_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps == 0) throw Error("probe steps must be positive");
    if (!(init_noise_std >= 0)) throw Error("probe init noise must be nonnegative");
    for (std::size_t i = 0; i < radii.size(); ++i) {
      if (!(radii[i] > 0)) throw Error("probe radii must be positive");
      if (i && !(radii[i] > radii[i - 1])) throw Error("probe radii must be strictly increasing");
    }
  }
};

struct ProbeReport {
  ProbeKind kind = ProbeKind::MaxLoss;
  Stage stage = Stage::AtConvergence;
  double radius = 0.0;
  double base = 0.0;
  std::vector<double> trajectory;  // value at theta_1 .. theta_steps
  double final_value = 0.0;
  double gap = 0.0;
  double max_excursion = 0.0;  // max ||theta_t - theta*||_inf over recorded iterates
  bool ok = true;
  std::string error;
};

inline double step_size(StepRule r, double eps) { return r == StepRule::EpsOver10 ? eps / 10.0 : eps; }

namespace detail {

inline double sgn0(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

/// Shared sign-ascent loop. value_grad(theta, grad) returns the probed value
/// and writes the ascent gradient.
template <class ValueGrad>
ProbeReport pga(ProbeKind kind, ValueGrad value_grad, const Tensor& center, double eps, double alpha,
                std::size_t steps, double noise_std, RngStream& rng) {
  if (!(eps > 0)) throw Error("probe radius must be positive");
  ProbeReport rep;
  rep.kind = kind;
  rep.radius = eps;
  rep.trajectory.assign(steps, std::numeric_limits<double>::quiet_NaN());
  Tensor scratch;
  rep.base = value_grad(center, scratch, false);

  Tensor theta = center;
  for (double& v : theta.raw()) v += rng.normal(0.0, noise_std);
  auto excursion = [&]() {
    double m = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) m = std::max(m, std::abs(theta[i] - center[i]));
    return m;
  };
  try {
    for (std::size_t t = 0; t < steps; ++t) {
      Tensor g;
      const double v = value_grad(theta, g, true);
      if (!std::isfinite(v)) throw NonFiniteError("probe value");
      if (t > 0) rep.trajectory[t - 1] = v;
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] += alpha * sgn0(g[i]);
        theta[i] = std::clamp(theta[i], center[i] - eps, center[i] + eps);
      }
      rep.max_excursion = std::max(rep.max_excursion, excursion());
    }
    Tensor g;
    rep.final_value = value_grad(theta, g, false);
    if (!std::isfinite(rep.final_value)) throw NonFiniteError("probe value");
    rep.trajectory[steps - 1] = rep.final_value;
    rep.gap = rep.final_value - rep.base;
  } catch (const Error& e) {
    rep.ok = false;
    rep.error = e.what();
    rep.final_value = std::numeric_limits<double>::quiet_NaN();
    rep.gap = std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

}  // namespace detail

/// Sign ascent on L(theta) - L(theta*) inside the L_inf ball of radius eps,
/// starting from theta* + N(0, noise^2); step eps/10 by default.
inline ProbeReport pga_max_loss(const Objective& f, const Tensor& center, double eps, const ProbeConfig& cfg,
                                RngStream& rng) {
  auto vg = [&](const Tensor& th, Tensor& g, bool need_grad) {
    Tensor tmp;
    const double v = f(th, need_grad ? g : tmp);
    return v;
  };
  return detail::pga(ProbeKind::MaxLoss, vg, center, eps, step_size(cfg.loss_step_rule, eps), cfg.steps,
                     cfg.init_noise_std, rng);
}

/// Sign ascent on ||grad L(theta)|| - ||grad L(theta*)||; the ascent gradient
/// is the Hessian-vector product H g / ||g||. Step eps by default.
inline ProbeReport pga_max_grad_norm(const Objective& f, const Tensor& center, double eps, const ProbeConfig& cfg,
                                     RngStream& rng) {
  auto vg = [&](const Tensor& th, Tensor& g, bool need_grad) {
    Tensor grad;
    f(th, grad);
    const double n = norm2(grad.data());
    if (need_grad) {
      try {
        g = grad_norm_gradient(f, th, std::nullopt, &grad);
      } catch (const ZeroGradientError&) {
        g = Tensor(th.shape());
      }
    }
    return n;
  };
  return detail::pga(ProbeKind::MaxGradNorm, vg, center, eps, step_size(cfg.grad_norm_step_rule, eps), cfg.steps,
                     cfg.init_noise_std, rng);
}

inline ProbeReport pga_max_loss(const OptimizeeSpec& spec, const Tensor& theta, const Dataset& data, double eps,
                                const ProbeConfig& cfg, RngStream& rng) {
  if (data.size() == 0) throw Error("probe data is empty");
  return pga_max_loss(make_objective(spec, data), theta, eps, cfg, rng);
}

inline ProbeReport pga_max_grad_norm(const OptimizeeSpec& spec, const Tensor& theta, const Dataset& data, double eps,
                                     const ProbeConfig& cfg, RngStream& rng) {
  if (data.size() == 0) throw Error("probe data is empty");
  return pga_max_grad_norm(make_objective(spec, data), theta, eps, cfg, rng);
}

/// Max-loss then grad-norm report for every radius. Each (radius, kind)
/// draws from its own stream derived from cfg.seed.
inline std::vector<ProbeReport> probe_sweep(const Objective& f, const Tensor& center, const ProbeConfig& cfg,
                                            Stage stage) {
  cfg.validate();
  std::vector<ProbeReport> out;
  const RngStream root(cfg.seed);
  for (std::size_t i = 0; i < cfg.radii.size(); ++i) {
    for (ProbeKind kind : {ProbeKind::MaxLoss, ProbeKind::MaxGradNorm}) {
      RngStream r = root.derive(2 * i + (kind == ProbeKind::MaxLoss ? 0 : 1));
      ProbeReport rep;
      try {
        rep = kind == ProbeKind::MaxLoss ? pga_max_loss(f, center, cfg.radii[i], cfg, r)
                                         : pga_max_grad_norm(f, center, cfg.radii[i], cfg, r);
      } catch (const Error& e) {
        rep.kind = kind;
        rep.radius = cfg.radii[i];
        rep.trajectory.assign(cfg.steps, std::numeric_limits<double>::quiet_NaN());
        rep.ok = false;
        rep.error = e.what();
        rep.base = rep.final_value = rep.gap = std::numeric_limits<double>::quiet_NaN();
      }
      rep.stage = stage;
      out.push_back(std::move(rep));
    }
  }
  return out;
}

inline std::vector<ProbeReport> probe_sweep(const OptimizeeSpec& spec, const Tensor& theta, const Dataset& data,
                                            const ProbeConfig& cfg, Stage stage) {
  if (data.size() == 0) throw Error("probe data is empty");
  return probe_sweep(make_objective(spec, data), theta, cfg, stage);
}

/// First step t whose best-so-far loss is not strictly improved on within
/// (t, t + patience]; nullopt when the history ends first.
inline std::optional<std::size_t> detect_convergence(const std::vector<double>& history,
                                                     std::size_t patience = 100) {
  if (history.empty()) throw Error("detect_convergence: empty history");
  if (patience == 0) throw Error("detect_convergence: patience must be positive");
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_at = 0;
  for (std::size_t t = 0; t < history.size(); ++t) {
    if (history[t] < best) {
      best = history[t];
      best_at = t;
    }
    // best_at is the latest strict improvement; every earlier step was
    // improved on within its window, so best_at is the first that stalls.
    if (t - best_at >= patience) return best_at;
  }
  return std::nullopt;
}

}  // namespace lolab
