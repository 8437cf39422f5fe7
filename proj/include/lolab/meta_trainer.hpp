#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lolab/data.hpp"
#include "lolab/hvp.hpp"
#include "lolab/learned_optimizer.hpp"
#include "lolab/optimizee.hpp"
#include "lolab/protocol.hpp"
#include "lolab/rng.hpp"
#include "lolab/tape.hpp"

namespace lolab {

class DivergenceError : public Error {
 public:
  using Error::Error;
};

enum class Regularizer { None, SAM, GSAM, GAM };
enum class LossWeighting { FinalStep, Uniform };
enum class BaseOptimizer { SGD, Adam };

inline const char* regularizer_name(Regularizer r) {
  switch (r) {
    case Regularizer::None: return "none";
    case Regularizer::SAM: return "sam";
    case Regularizer::GSAM: return "gsam";
    case Regularizer::GAM: return "gam";
  }
  return "?";
}

inline Regularizer parse_regularizer(const std::string& s) {
  if (s == "none" || s == "vanilla") return Regularizer::None;
  if (s == "sam") return Regularizer::SAM;
  if (s == "gsam") return Regularizer::GSAM;
  if (s == "gam") return Regularizer::GAM;
  throw Error("unknown regularizer '" + s + "'");
}

/// Denominator stabilizer of the GSAM perturbation.
inline constexpr double kGsamEps = 1e-12;

struct MetaConfig {
  LoConfig lo;

  std::size_t T_unroll = 20;
  LossWeighting weighting = LossWeighting::FinalStep;
  double meta_lr = 1e-3;
  double meta_lr_min = 1e-5;  // cosine floor for GSAM/GAM
  BaseOptimizer base_optimizer = BaseOptimizer::Adam;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

  double lambda_smooth = 1.0;
  double lambda_reg = 0.1;
  Regularizer regularizer = Regularizer::None;
  double rho = 0.05;
  double rho_min = 0.0;  // scheduled lower end for GSAM/GAM
  double alpha_gsam = 0.1;
  bool resample_perturbed = false;  // fresh data for the perturbed pass

  double smooth_eps = 0.01;
  std::size_t n_pga = 3;
  double smooth_alpha = 0.0;  // 0 selects smooth_eps / n_pga

  double optimizee_l2 = 0.0;  // adds (l2 / 2) ||theta_T||^2 to the meta-loss

  std::vector<std::size_t> curriculum_train{100, 200, 500, 1000};
  std::vector<std::size_t> curriculum_eval{200, 500, 1000};
  std::size_t stage_patience = 3;      // evaluations without improvement
  std::size_t stage_cap = 200;         // meta-steps per stage
  std::size_t eval_every = 1;          // optimizees between evaluations
  std::size_t eval_tasks = 4;
  std::size_t batch_size = 128;        // 0 = full batch
  std::uint64_t seed = 0;

  double pga_alpha() const { return smooth_alpha > 0 ? smooth_alpha : smooth_eps / static_cast<double>(n_pga); }

  void validate() const {
    lo.validate();
    if (T_unroll == 0) throw Error("T_unroll must be >= 1");
    if (!(meta_lr >= 0) || !(meta_lr_min >= 0)) throw Error("meta learning rates must be nonnegative");
    if (!(lambda_smooth >= 0) || !(lambda_reg >= 0)) throw Error("lambdas must be nonnegative");
    if (!(rho >= 0) || !(rho_min >= 0) || rho_min > rho) throw Error("need 0 <= rho_min <= rho");
    if (lambda_smooth > 0 && (!(smooth_eps > 0) || n_pga == 0)) throw Error("smoothing needs eps > 0, N_PGA >= 1");
    if (curriculum_train.empty() || curriculum_eval.empty()) throw Error("empty curriculum");
    for (std::size_t n : curriculum_train)
      if (n == 0) throw Error("curriculum lengths must be positive");
    if (std::find(curriculum_eval.begin(), curriculum_eval.end(), curriculum_train.front()) != curriculum_eval.end())
      throw Error("curriculum_eval must exclude the first training length");
    if (stage_cap == 0 || eval_every == 0 || eval_tasks == 0 || stage_patience == 0)
      throw Error("stage_cap, eval_every, eval_tasks, stage_patience must be positive");
  }
};

// ---- schedulers -----------------------------------------------------------

/// Cosine-annealed learning rate with a rho that tracks lr's relative
/// position between lr_min and lr_max.
struct SchedulerState {
  std::size_t step_index = 0;
  std::size_t total_steps = 1;
  double lr_max = 1e-3, lr_min = 0.0;
  double rho_max = 0.05, rho_min = 0.0;

  double lr() const {
    const double frac = std::min(1.0, static_cast<double>(step_index) / static_cast<double>(std::max<std::size_t>(1, total_steps)));
    const double v = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
    return std::clamp(v, std::min(lr_min, lr_max), std::max(lr_min, lr_max));
  }

  double rho() const {
    if (lr_max == lr_min) return rho_max;
    const double pos = std::clamp((lr() - lr_min) / (lr_max - lr_min), 0.0, 1.0);
    return rho_min + (rho_max - rho_min) * pos;
  }

  void advance() { ++step_index; }
};

// ---- base optimizers ------------------------------------------------------

class Adam {
 public:
  Adam(double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) : b1_(b1), b2_(b2), eps_(eps) {}

  void step(Tensor& x, const Tensor& g, double lr) {
    if (m_.size() != x.size()) {
      m_ = Tensor(x.shape());
      v_ = Tensor(x.shape());
      t_ = 0;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1 - b1_) * g[i];
      v_[i] = b2_ * v_[i] + (1 - b2_) * g[i] * g[i];
      x[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double b1_, b2_, eps_;
  Tensor m_, v_;
  std::size_t t_ = 0;
};

// ---- data windows ---------------------------------------------------------

/// Minibatch without replacement; the whole set when batch == 0 or >= N.
inline Dataset draw_batch(const Dataset& d, std::size_t batch, RngStream& rng) {
  if (batch == 0 || batch >= d.size()) return d;
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(d.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(batch);
  return d.subset(idx);
}

/// Data replayed by every pass over one truncation window: batches[t] feeds
/// the gradient at theta_t; batches[T] scores theta_T.
struct Window {
  std::vector<Dataset> batches;
  std::uint64_t smooth_seed = 0;

  std::size_t length() const { return batches.size() - 1; }
};

inline Window make_window(const Dataset& d, std::size_t T, std::size_t batch, RngStream& rng) {
  Window w;
  for (std::size_t t = 0; t <= T; ++t) w.batches.push_back(draw_batch(d, batch, rng));
  w.smooth_seed = rng.next_u64();
  return w;
}

// ---- smoothing regularization ---------------------------------------------

/// u(s) recorded on a tape; phi and the hidden state are baked in.
using UpdateMap = std::function<Var(Tape&, Var input)>;

struct SmoothResult {
  double value = 0.0;  // ||u(s) - u(s')||^2 at the final s'
  Tensor perturbed;    // s'
};

/// Sign-ascent PGA for max_{s' in B_inf(s, eps)} ||u(s) - u(s')||^2. Starts
/// from a uniform point in the ball (the objective's gradient vanishes at s).
inline SmoothResult smooth_reg(const UpdateMap& u, const Tensor& s, double eps, std::size_t n_pga, double alpha,
                               RngStream& rng) {
  protocol::regularizer_entry("smoothing");
  if (!(eps > 0) || n_pga == 0) throw Error("smooth_reg needs eps > 0 and N_PGA >= 1");
  Tensor base;
  {
    Tape t;
    base = u(t, t.constant(s)).value();
  }
  Tensor sp = s;
  for (double& v : sp.raw()) v += rng.uniform(-eps, eps);
  auto project = [&](Tensor& x) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], s[i] - eps, s[i] + eps);
  };
  for (std::size_t k = 0; k < n_pga; ++k) {
    Tape t;
    Var xv = t.variable(sp);
    Var d = sub(t.constant(base), u(t, xv));
    Var obj = sum(mul(d, d));
    const Tensor g = t.backward(obj).wrt(xv);
    for (std::size_t i = 0; i < sp.size(); ++i) sp[i] += alpha * (g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0));
    project(sp);
  }
  Tape t;
  Var d = sub(t.constant(base), u(t, t.constant(sp)));
  return {sum(mul(d, d)).item(), std::move(sp)};
}

// ---- unroll ---------------------------------------------------------------

struct UnrollOptions {
  LossWeighting weighting = LossWeighting::FinalStep;
  double lambda_smooth = 0.0;
  double smooth_eps = 0.01;
  std::size_t n_pga = 3;
  double smooth_alpha = 0.01 / 3;
  double optimizee_l2 = 0.0;
  bool compute_grad = true;
  /// When set, these stand in for the inner gradients (replay mode).
  const std::vector<Tensor>* frozen_grads = nullptr;
};

inline UnrollOptions unroll_options(const MetaConfig& c) {
  UnrollOptions o;
  o.weighting = c.weighting;
  o.lambda_smooth = c.lambda_smooth;
  o.smooth_eps = c.smooth_eps;
  o.n_pga = c.n_pga;
  o.smooth_alpha = c.pga_alpha();
  o.optimizee_l2 = c.optimizee_l2;
  return o;
}

struct UnrollResult {
  double total = 0.0;      // meta_loss + lambda_smooth * smooth
  double meta_loss = 0.0;  // task loss (+ optional L2 penalty)
  double smooth = 0.0;     // mean smoothing term over the window
  Tensor grad_phi;
  Tensor theta_end;
  OptState state_end;
  std::vector<Tensor> inner_grads;
};

/// T inner steps theta <- theta + F(grad; phi) recorded on a phi tape. Inner
/// gradients enter the optimizer as constants (first-order meta-gradient).
inline UnrollResult unroll(const CoordinatewiseLSTM& lo, const Tensor& phi, const OptimizeeSpec& spec,
                           const Window& win, const Tensor& theta0, const OptState& state0,
                           const UnrollOptions& opt) {
  const std::size_t T = win.length();
  if (T == 0) throw Error("unroll needs T >= 1");
  if (opt.frozen_grads && opt.frozen_grads->size() != T) throw Error("frozen gradient count differs from T");
  if (opt.lambda_smooth > 0) protocol::regularizer_entry("smoothing");
  if (opt.optimizee_l2 > 0) protocol::regularizer_entry("l2");

  Tape tape;
  Var phi_v = opt.compute_grad ? tape.variable(phi) : tape.constant(phi);
  Var theta = tape.constant(theta0);
  LstmVars st = lo.state_constants(tape, state0);
  RngStream srng(win.smooth_seed);

  UnrollResult res;
  std::vector<Var> smooth_terms;
  std::vector<Var> step_losses;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor g;
    if (opt.frozen_grads) {
      g = (*opt.frozen_grads)[t];
    } else {
      try {
        loss_and_grad(spec, theta.value(), win.batches[t], g);
      } catch (const NonFiniteError& e) {
        throw DivergenceError(std::string("inner loss diverged: ") + e.what());
      }
    }
    if (!g.all_finite()) throw DivergenceError("inner gradient is not finite");
    const Tensor input = lo.make_input(g.data(), theta.value().data());
    res.inner_grads.push_back(std::move(g));
    Var in = tape.constant(input);
    auto step = lo.step_on_tape(phi_v, in, st);

    if (opt.lambda_smooth > 0) {
      const Tensor phi_now = phi_v.value();
      const LstmVars frozen_state = st;
      const OptState sv = lo.state_values(frozen_state);
      UpdateMap u = [&lo, &phi_now, &sv](Tape& t2, Var x) {
        return lo.step_on_tape(t2.constant(phi_now), x, lo.state_constants(t2, sv)).update;
      };
      const SmoothResult sr = smooth_reg(u, input, opt.smooth_eps, opt.n_pga, opt.smooth_alpha, srng);
      Var u_pert = lo.step_on_tape(phi_v, tape.constant(sr.perturbed), st).update;
      Var d = sub(step.update, u_pert);
      smooth_terms.push_back(sum(mul(d, d)));
    }

    try {
      theta = add(theta, step.update);
      st = step.state;
      if (opt.weighting == LossWeighting::Uniform) step_losses.push_back(optimizee_loss(spec, theta, win.batches[t + 1]));
    } catch (const NonFiniteError& e) {
      throw DivergenceError(std::string("unroll diverged: ") + e.what());
    }
  }

  Var meta;
  try {
    if (opt.weighting == LossWeighting::FinalStep) {
      meta = optimizee_loss(spec, theta, win.batches[T]);
    } else {
      meta = step_losses[0];
      for (std::size_t i = 1; i < step_losses.size(); ++i) meta = add(meta, step_losses[i]);
      meta = scale(meta, 1.0 / static_cast<double>(T));
    }
    if (opt.optimizee_l2 > 0) {
      Var n = l2_norm(theta);
      meta = add(meta, scale(mul(n, n), 0.5 * opt.optimizee_l2));
    }
  } catch (const NonFiniteError& e) {
    throw DivergenceError(std::string("meta-loss diverged: ") + e.what());
  }
  Var total = meta;
  if (!smooth_terms.empty()) {
    Var s = smooth_terms[0];
    for (std::size_t i = 1; i < smooth_terms.size(); ++i) s = add(s, smooth_terms[i]);
    s = scale(s, 1.0 / static_cast<double>(smooth_terms.size()));
    res.smooth = s.item();
    total = add(meta, scale(s, opt.lambda_smooth));
  }
  res.meta_loss = meta.item();
  res.total = total.item();
  res.theta_end = theta.value();
  res.state_end = lo.state_values(st);
  if (opt.compute_grad) res.grad_phi = tape.backward(total).wrt(phi_v);
  return res;
}

/// L_meta + lambda_smooth * L_smooth + lambda_reg * L_reg.
inline double total_meta_loss(double meta, double smooth, double reg, double lambda_smooth, double lambda_reg) {
  if (!std::isfinite(meta) || !std::isfinite(smooth) || !std::isfinite(reg))
    throw NonFiniteError("total_meta_loss: non-finite component");
  return meta + lambda_smooth * smooth + lambda_reg * reg;
}

// ---- sharpness-aware meta-steps -------------------------------------------

/// Descent direction produced by one regularized meta-step.
struct RegStep {
  Tensor direction;
  Tensor perturbation;  // phi_adv - phi (zeros when skipped)
  double loss = 0.0;    // L(phi)
  double reg = 0.0;     // SAM/GSAM: L(phi_adv); GAM: rho * ||grad L(phi_adv)||
  bool skipped = false;
};

inline RegStep sam_direction(const Objective& f, const Tensor& phi, double rho, const Tensor* grad = nullptr,
                             std::optional<double> loss = std::nullopt) {
  protocol::regularizer_entry("sam");
  RegStep r;
  Tensor g;
  if (grad) {
    g = *grad;
    r.loss = loss.value_or(0.0);
  } else {
    r.loss = f(phi, g);
  }
  const double gn = norm2(g.data());
  r.perturbation = Tensor(phi.shape());
  if (!(gn > 0.0)) {
    r.direction = g;
    r.reg = r.loss;
    r.skipped = true;
    return r;
  }
  axpy(rho / gn, g.data(), r.perturbation.data());
  Tensor adv = phi + r.perturbation;
  r.reg = f(adv, r.direction);
  return r;
}

/// phi' = phi - eta * grad L(phi + rho g/||g||).
inline Tensor sam_meta_step(const Tensor& phi, const Objective& f, double rho, double eta) {
  RegStep r = sam_direction(f, phi, rho);
  Tensor out = phi;
  axpy(-eta, r.direction.data(), out.data());
  return out;
}

struct Decomposition {
  Tensor parallel, orthogonal;
};

/// Split g into components parallel and orthogonal to ref.
inline Decomposition decompose(const Tensor& g, const Tensor& ref) {
  const double rr = dot(ref.data(), ref.data());
  Decomposition d{Tensor(g.shape()), g};
  if (!(rr > 0.0)) return d;
  const double c = dot(g.data(), ref.data()) / rr;
  axpy(c, ref.data(), d.parallel.data());
  axpy(-c, ref.data(), d.orthogonal.data());
  return d;
}

/// g_p - alpha * g_perp, with g_p = grad L(phi + rho g / (||g|| + 1e-12)) and
/// g_perp the part of g = grad L(phi) orthogonal to g_p.
inline RegStep gsam_direction(const Objective& f, const Tensor& phi, double rho, double alpha,
                              const Tensor* grad = nullptr, std::optional<double> loss = std::nullopt) {
  protocol::regularizer_entry("gsam");
  RegStep r;
  Tensor g;
  if (grad) {
    g = *grad;
    r.loss = loss.value_or(0.0);
  } else {
    r.loss = f(phi, g);
  }
  const double gn = norm2(g.data());
  r.perturbation = Tensor(phi.shape());
  axpy(rho / (gn + kGsamEps), g.data(), r.perturbation.data());
  Tensor gp;
  r.reg = f(phi + r.perturbation, gp);
  if (!(norm2(gp.data()) > 0.0)) {
    r.direction = gp;
    r.skipped = true;
    return r;
  }
  const Decomposition d = decompose(g, gp);
  r.direction = gp;
  axpy(-alpha, d.orthogonal.data(), r.direction.data());
  return r;
}

inline Tensor gsam_meta_step(const Tensor& phi, const Objective& f, const SchedulerState& sched, double alpha) {
  RegStep r = gsam_direction(f, phi, sched.rho(), alpha);
  Tensor out = phi;
  axpy(-sched.lr(), r.direction.data(), out.data());
  return out;
}

/// grad L(phi) + lambda_reg * rho * grad ||grad L(phi_adv)||, where
/// phi_adv = phi + rho f/||f|| and f = grad ||grad L(phi)||.
inline RegStep gam_direction(const Objective& f, const Tensor& phi, double rho, double lambda_reg,
                             const Tensor* grad = nullptr, std::optional<double> loss = std::nullopt) {
  protocol::regularizer_entry("gam");
  RegStep r;
  Tensor g;
  if (grad) {
    g = *grad;
    r.loss = loss.value_or(0.0);
  } else {
    r.loss = f(phi, g);
  }
  r.direction = g;
  r.perturbation = Tensor(phi.shape());
  if (lambda_reg == 0.0) {
    r.skipped = true;
    return r;
  }
  try {
    const Tensor fdir = grad_norm_gradient(f, phi, std::nullopt, &g);
    const double fn = norm2(fdir.data());
    if (!(fn > 0.0)) {
      r.skipped = true;
      return r;
    }
    axpy(rho / fn, fdir.data(), r.perturbation.data());
    const Tensor adv = phi + r.perturbation;
    Tensor g_adv;
    f(adv, g_adv);
    r.reg = rho * norm2(g_adv.data());
    const Tensor reg_grad = rho * grad_norm_gradient(f, adv, std::nullopt, &g_adv);
    axpy(lambda_reg, reg_grad.data(), r.direction.data());
  } catch (const ZeroGradientError&) {
    r.skipped = true;
    r.perturbation = Tensor(phi.shape());
  }
  return r;
}

inline Tensor gam_meta_step(const Tensor& phi, const Objective& f, double rho, double eta, double lambda_reg) {
  RegStep r = gam_direction(f, phi, rho, lambda_reg);
  Tensor out = phi;
  axpy(-eta, r.direction.data(), out.data());
  return out;
}

// ---- applying a learned optimizer -----------------------------------------

struct LoRun {
  Tensor theta;
  std::vector<double> losses;  // loss at theta_t on the batch that produced grad_t
  bool diverged = false;
};

/// Observer called with (t, theta_t, loss_t) before the t-th update; returning
/// false stops the run with theta_t.
using StepObserver = std::function<bool(std::size_t, const Tensor&, double)>;

/// theta <- theta + F(grad) for at most `steps` steps.
inline LoRun run_lo(const CoordinatewiseLSTM& lo, const OptimizeeSpec& spec, const Dataset& data, Tensor theta,
                    std::size_t steps, std::size_t batch, RngStream& rng, const StepObserver& on_step = {}) {
  LoRun run;
  OptState st = OptState::zeros(theta.size(), lo.config());
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor g;
    try {
      const Dataset b = draw_batch(data, batch, rng);
      const double loss = loss_and_grad(spec, theta, b, g);
      run.losses.push_back(loss);
      if (on_step && !on_step(t, theta, loss)) break;
      if (protocol::in_meta_test()) protocol::meta_test_step();
      auto [upd, next] = lo.step(g, st, &theta);
      axpy(1.0, upd.data(), theta.data());
      if (!theta.all_finite()) throw NonFiniteError("theta");
      st = std::move(next);
    } catch (const NonFiniteError&) {
      run.diverged = true;
      break;
    }
  }
  run.theta = std::move(theta);
  return run;
}

// ---- meta-training --------------------------------------------------------

/// One optimizee problem drawn for meta-training or evaluation.
struct MetaTask {
  OptimizeeSpec spec;
  Dataset train;
};

using TaskSampler = std::function<MetaTask(RngStream&)>;

struct TrainLogRecord {
  std::size_t stage = 0;
  std::size_t stage_length = 0;
  std::size_t meta_step = 0;
  double meta_loss = 0.0;
  double smooth = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double rho = 0.0;
  bool diverged = false;
  std::vector<std::pair<std::size_t, double>> eval;  // (length, mean loss); empty between evaluations
};

struct TrainResult {
  CoordinatewiseLSTM best;
  CoordinatewiseLSTM last;
  std::vector<TrainLogRecord> log;
  std::size_t meta_steps = 0;
};

/// Mean final loss of the optimizer over fixed evaluation tasks.
inline double evaluate_lo(const CoordinatewiseLSTM& lo, const std::vector<MetaTask>& tasks,
                          const std::vector<Tensor>& inits, std::size_t steps, std::size_t batch,
                          std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    RngStream r = RngStream(seed).derive(i);
    LoRun run = run_lo(lo, tasks[i].spec, tasks[i].train, inits[i], steps, batch, r);
    double l = std::numeric_limits<double>::max() / 1e6;
    if (!run.diverged) {
      try {
        l = loss_value(tasks[i].spec, run.theta, tasks[i].train);
      } catch (const NonFiniteError&) {
      }
    }
    total += l;
  }
  return total / static_cast<double>(tasks.size());
}

/// Eval lengths active in curriculum stage k: the first min(k+1, |eval|).
inline std::vector<std::size_t> stage_eval_lengths(const MetaConfig& c, std::size_t stage) {
  const std::size_t n = std::min(stage + 1, c.curriculum_eval.size());
  return {c.curriculum_eval.begin(), c.curriculum_eval.begin() + static_cast<std::ptrdiff_t>(n)};
}

inline TrainResult train_meta(const MetaConfig& cfg, const TaskSampler& sampler,
                              const std::function<void(const TrainLogRecord&)>& sink = {}) {
  cfg.validate();
  RngStream root(cfg.seed);
  RngStream init_rng = root.derive(1);
  CoordinatewiseLSTM lo(cfg.lo, init_rng);
  Tensor phi = lo.phi();

  // Fixed evaluation problems shared by every evaluation.
  RngStream eval_rng = root.derive(2);
  std::vector<MetaTask> eval_tasks;
  std::vector<Tensor> eval_inits;
  for (std::size_t i = 0; i < cfg.eval_tasks; ++i) {
    eval_tasks.push_back(sampler(eval_rng));
    eval_inits.push_back(init_optimizee(eval_tasks.back().spec, eval_rng));
  }
  const std::uint64_t eval_seed = eval_rng.next_u64();

  Adam adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  const bool scheduled = cfg.regularizer == Regularizer::GSAM || cfg.regularizer == Regularizer::GAM;
  SchedulerState sched{0, cfg.stage_cap * cfg.curriculum_train.size(), cfg.meta_lr,
                       scheduled ? std::min(cfg.meta_lr_min, cfg.meta_lr) : cfg.meta_lr, cfg.rho,
                       scheduled ? cfg.rho_min : cfg.rho};
  const UnrollOptions uopt = unroll_options(cfg);

  TrainResult out{lo, lo, {}, 0};
  CoordinatewiseLSTM probe_lo(cfg.lo);

  for (std::size_t stage = 0; stage < cfg.curriculum_train.size(); ++stage) {
    const std::size_t len = cfg.curriculum_train[stage];
    const auto eval_lengths = stage_eval_lengths(cfg, stage);
    RngStream srng = root.derive(100 + stage);
    double best = std::numeric_limits<double>::infinity();
    Tensor best_phi = phi;
    std::size_t stale = 0, steps = 0, optimizees = 0, diverged = 0;

    auto evaluate = [&]() {
      probe_lo.set_phi(phi);
      std::vector<std::pair<std::size_t, double>> ev;
      for (std::size_t n : eval_lengths)
        ev.emplace_back(n, evaluate_lo(probe_lo, eval_tasks, eval_inits, n, cfg.batch_size, eval_seed));
      const double metric = ev.back().second;
      if (metric < best) {
        best = metric;
        best_phi = phi;
        stale = 0;
      } else {
        ++stale;
      }
      return ev;
    };

    {
      TrainLogRecord rec;
      rec.stage = stage;
      rec.stage_length = len;
      rec.meta_step = out.meta_steps;
      rec.lr = sched.lr();
      rec.rho = sched.rho();
      rec.eval = evaluate();
      stale = 0;
      out.log.push_back(rec);
      if (sink) sink(rec);
    }

    while (steps < cfg.stage_cap && stale < cfg.stage_patience) {
      MetaTask task = sampler(srng);
      Tensor theta = init_optimizee(task.spec, srng);
      OptState state = OptState::zeros(theta.size(), cfg.lo);
      ++optimizees;
      bool task_diverged = false;
      const std::size_t windows = (len + cfg.T_unroll - 1) / cfg.T_unroll;
      for (std::size_t w = 0; w < windows && steps < cfg.stage_cap; ++w) {
        const std::size_t T = std::min(cfg.T_unroll, len - w * cfg.T_unroll);
        const Window win = make_window(task.train, T, cfg.batch_size, srng);
        std::optional<Window> alt;
        if (cfg.resample_perturbed && cfg.regularizer != Regularizer::None)
          alt = make_window(task.train, T, cfg.batch_size, srng);

        TrainLogRecord rec;
        rec.stage = stage;
        rec.stage_length = len;
        rec.lr = sched.lr();
        rec.rho = sched.rho();
        try {
          UnrollResult base = unroll(lo, phi, task.spec, win, theta, state, uopt);
          const Window& pw = alt ? *alt : win;
          Objective f = [&](const Tensor& p, Tensor& grad) {
            UnrollResult r = unroll(lo, p, task.spec, pw, theta, state, uopt);
            grad = std::move(r.grad_phi);
            return r.total;
          };
          Tensor dir;
          switch (cfg.regularizer) {
            case Regularizer::None:
              dir = base.grad_phi;
              break;
            case Regularizer::SAM: {
              RegStep r = sam_direction(f, phi, sched.rho(), alt ? nullptr : &base.grad_phi, base.total);
              dir = std::move(r.direction);
              rec.reg = r.reg;
              break;
            }
            case Regularizer::GSAM: {
              RegStep r = gsam_direction(f, phi, sched.rho(), cfg.alpha_gsam, alt ? nullptr : &base.grad_phi, base.total);
              dir = std::move(r.direction);
              rec.reg = r.reg;
              break;
            }
            case Regularizer::GAM: {
              RegStep r = gam_direction(f, phi, sched.rho(), cfg.lambda_reg, alt ? nullptr : &base.grad_phi, base.total);
              dir = std::move(r.direction);
              rec.reg = r.reg;
              break;
            }
          }
          if (!dir.all_finite()) throw DivergenceError("meta-gradient is not finite");
          if (cfg.base_optimizer == BaseOptimizer::Adam) {
            adam.step(phi, dir, sched.lr());
          } else {
            axpy(-sched.lr(), dir.data(), phi.data());
          }
          lo.set_phi(phi);
          theta = std::move(base.theta_end);
          state = std::move(base.state_end);
          rec.meta_loss = base.meta_loss;
          rec.smooth = base.smooth;
          const bool reg_in_total = cfg.regularizer == Regularizer::GAM;
          rec.total = total_meta_loss(base.meta_loss, base.smooth, reg_in_total ? rec.reg : 0.0, cfg.lambda_smooth,
                                      cfg.lambda_reg);
        } catch (const DivergenceError&) {
          rec.diverged = true;
          task_diverged = true;
        }
        rec.meta_step = out.meta_steps;
        ++out.meta_steps;
        ++steps;
        sched.advance();
        out.log.push_back(rec);
        if (sink) sink(rec);
        if (task_diverged) break;
      }
      if (task_diverged) ++diverged;
      if (optimizees % cfg.eval_every == 0 || steps >= cfg.stage_cap) {
        TrainLogRecord rec;
        rec.stage = stage;
        rec.stage_length = len;
        rec.meta_step = out.meta_steps;
        rec.lr = sched.lr();
        rec.rho = sched.rho();
        rec.eval = evaluate();
        out.log.push_back(rec);
        if (sink) sink(rec);
      }
    }
    if (2 * diverged > optimizees)
      throw DivergenceError("stage " + std::to_string(stage) + ": " + std::to_string(diverged) + " of " +
                            std::to_string(optimizees) + " optimizees diverged");
    out.last.set_phi(phi);
    phi = best_phi;
    lo.set_phi(phi);
  }
  out.best = lo;
  return out;
}

}  // namespace lolab
