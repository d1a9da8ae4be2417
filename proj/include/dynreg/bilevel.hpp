#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "dynreg/adjoint.hpp"
#include "dynreg/metrics.hpp"
#include "dynreg/pdhgm.hpp"
#include "dynreg/random.hpp"
#include "dynreg/regularizers.hpp"

namespace dynreg {

struct TraceEntry {
  std::size_t iteration;
  std::vector<double> params;
  double value;
  double step;
  bool accepted;
};

/// Inner problem behind F: the PDHGM iterate of the unsmoothed problem, or that iterate
/// refined by Newton-CG to the minimiser of the smoothed energy.
enum class InnerSolve { pdhgm, smoothed };

struct OuterConfig {
  double armijo_c = 1e-4;
  double rho = 1e-8;  // relative-step stopping ratio
  std::size_t max_iterations = 100;
  double alpha_min = 1e-5;
  double alpha_max = 100.0;
  double kappa_min = -50.0;
  double kappa_max = 50.0;
  std::size_t starts = 100;
  std::optional<std::array<double, 2>> start_means;  // per-model default when empty
  double kappa_init_min = 0.05;
  double kappa_init_max = 0.95;
  std::uint64_t seed = 0;
  std::optional<std::size_t> inner_iterations;  // per-model default when empty
  std::optional<bool> inner_accelerated;
  InnerSolve inner_solve = InnerSolve::smoothed;
  NewtonOptions newton{};
  GradientOptions gradient{};
  double fd_step = 1e-4;  // rigid models: central differences with step fd_step * (1 + |a_i|)
  unsigned threads = 1;
  // Called for every trace entry as it is recorded; must be thread-safe when threads > 1.
  std::function<void(std::size_t start, const TraceEntry&)> on_trace;
};

/// Multistart sampling means: (0.15, 0.15) for TVTV-type models, (3.9, 0.15) for L2TV-type.
inline std::array<double, 2> default_start_means(ModelKind kind) {
  return first_term_quadratic(kind) ? std::array<double, 2>{3.9, 0.15} : std::array<double, 2>{0.15, 0.15};
}

inline std::vector<double> to_vector(const ParamVector& p) {
  std::vector<double> v{p.alpha1, p.alpha2};
  if (p.kappa) v.push_back(*p.kappa);
  return v;
}

inline ParamVector from_vector(ModelKind kind, const std::vector<double>& v) {
  ParamVector p{v.at(0), v.at(1), std::nullopt};
  if (is_ic(kind)) p.kappa = v.at(2);
  return p;
}

/// Euclidean projection onto the parameter box.
inline std::vector<double> project_box(const OuterConfig& c, std::vector<double> a) {
  a[0] = std::clamp(a[0], c.alpha_min, c.alpha_max);
  a[1] = std::clamp(a[1], c.alpha_min, c.alpha_max);
  if (a.size() > 2) a[2] = std::clamp(a[2], c.kappa_min, c.kappa_max);
  return a;
}

struct LineSearchTrial {
  double step;
  double value;
};

struct ArmijoResult {
  bool accepted = false;
  bool ascent = false;  // rejected without evaluation
  double step = 0.0;
  std::vector<double> point;
  double value = 0.0;
  std::vector<LineSearchTrial> trials;
  /// Backtracking stopped because the projected step fell to min_step or below.
  bool below_floor = false;
};

/// Backtracking over steps 1, 1/2, 1/4, ... down to 2^-30 with the projected trial point
/// P(a + s d) and the sufficient-decrease test F(trial) - F(a) <= s c <grad, d>.
/// A trial point within min_step of a ends the search without being evaluated.
inline ArmijoResult armijo_search(const std::function<double(const std::vector<double>&)>& objective,
                                  const std::vector<double>& a, double fa, const std::vector<double>& d,
                                  const std::vector<double>& grad, double c,
                                  const std::function<std::vector<double>(std::vector<double>)>& project,
                                  double min_step = 0.0) {
  ArmijoResult r;
  double slope = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) slope += grad[i] * d[i];
  if (!(slope < 0.0)) {
    r.ascent = true;
    return r;
  }
  for (int k = 0; k <= 30; ++k) {
    const double s = std::ldexp(1.0, -k);
    std::vector<double> trial(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) trial[i] = a[i] + s * d[i];
    trial = project(std::move(trial));
    double moved = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) moved += (trial[i] - a[i]) * (trial[i] - a[i]);
    if (std::sqrt(moved) <= min_step) {
      r.below_floor = true;
      return r;
    }
    const double ft = objective(trial);
    r.trials.push_back({s, ft});
    if (std::isfinite(ft) && ft - fa <= s * c * slope) {
      r.accepted = true;
      r.step = s;
      r.point = std::move(trial);
      r.value = ft;
      return r;
    }
  }
  return r;
}

/// BFGS update of the quasi-Hessian B, applied only when <s, y> > 1e-12 ||s|| ||y||,
/// which keeps B positive definite. Returns whether B changed.
inline bool bfgs_update(Eigen::MatrixXd& b, const Eigen::VectorXd& s, const Eigen::VectorXd& y) {
  const double sy = s.dot(y);
  if (!(sy > 1e-12 * s.norm() * y.norm())) return false;
  const Eigen::VectorXd bs = b * s;
  const double sbs = s.dot(bs);
  if (!(sbs > 0.0)) return false;
  b += y * y.transpose() / sy - bs * bs.transpose() / sbs;
  b = 0.5 * (b + b.transpose());
  return true;
}

/// ||a_i - a_{i-1}|| < rho ||a_i||.
inline bool stop_check(const std::vector<double>& current, const std::vector<double>& previous, double rho) {
  double dn = 0.0, an = 0.0;
  for (std::size_t i = 0; i < current.size(); ++i) {
    dn += (current[i] - previous[i]) * (current[i] - previous[i]);
    an += current[i] * current[i];
  }
  return std::sqrt(dn) < rho * std::sqrt(an);
}

/// Alphas i.i.d. chi-squared(3) rescaled to the model means; kappa uniform on the
/// configured interval. Every sample is projected into the box.
inline std::vector<ParamVector> sample_starts(ModelKind kind, std::size_t count, std::uint64_t seed,
                                              const OuterConfig& config = {}) {
  const auto means = config.start_means.value_or(default_start_means(kind));
  std::vector<ParamVector> out;
  out.reserve(count);
  const auto chi2_3 = [&](std::uint64_t stream, std::uint64_t k) {
    double s = 0.0;
    for (std::uint64_t j = 0; j < 3; ++j) {
      const double z = standard_normal(seed, stream, 3 * k + j);
      s += z * z;
    }
    return s;
  };
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<double> a{means[0] * chi2_3(1, k) / 3.0, means[1] * chi2_3(2, k) / 3.0};
    if (is_ic(kind))
      a.push_back(config.kappa_init_min +
                  (config.kappa_init_max - config.kappa_init_min) * uniform_open01(seed, 3, k));
    out.push_back(from_vector(kind, project_box(config, std::move(a))));
  }
  return out;
}

struct StartResult {
  ParamVector initial;
  ParamVector final_params;
  double value = std::numeric_limits<double>::infinity();
  double psnr = -std::numeric_limits<double>::infinity();
  double ssim = 0.0;
  std::size_t iterations = 0;
  std::string status;  // converged | max_iterations | line_search_failed | failed: ...
  bool ok = false;
  std::vector<TraceEntry> trace;
  VideoVolume u, w;
};

struct LearnResult {
  ModelKind model = ModelKind::ic_tvtv;
  ParamVector params;           // as optimised
  NormalizedParams normalized;  // kappa mapped into [0, 1]
  double opt_value = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t best_start = 0;
  std::vector<StartResult> starts;
  VideoVolume u, w;
};

inline SolverConfig inner_config(ModelKind kind, const OuterConfig& c) {
  SolverConfig s = default_solver_config(kind);
  if (c.inner_accelerated) s.accelerated = *c.inner_accelerated;
  if (c.inner_iterations) s.iterations = *c.inner_iterations;
  return s;
}

namespace detail {

struct InnerEval {
  double value;
  SaddleState state;
};

// PDHGM mode: PDHGM from `warm`. Smoothed mode: Newton-CG from the primal part of `warm`,
// preceded by PDHGM when `warm` is a cold start.
inline InnerEval evaluate_inner(const ModelSpec& model, const VideoVolume& f, const VideoVolume& g,
                                const std::vector<double>& a, const SolverConfig& base, const SaddleState& warm,
                                const OuterConfig& c, bool cold = false) {
  const ParamVector p = from_vector(model.kind, a);
  SaddleState s;
  if (c.inner_solve == InnerSolve::pdhgm || cold) {
    SolverConfig cfg = base;
    cfg.warm_start = warm;
    s = pdhgm_solve(model, f, p, cfg);
  } else {
    s = warm;
  }
  if (c.inner_solve == InnerSolve::smoothed) {
    SmoothedSolution sm = solve_smoothed_inner(model, f, p, s.u, s.w, c.newton);
    if (!sm.converged)
      throw SolverError("smoothed inner solve stopped at residual " + std::to_string(sm.residual_norm));
    s.u = std::move(sm.u);
    s.w = std::move(sm.w);
  }
  const double v = outer_objective(s.u, g);
  return {v, std::move(s)};
}

inline std::vector<double> outer_gradient(const ModelSpec& model, const VideoVolume& f, const VideoVolume& g,
                                          const std::vector<double>& a, const SaddleState& state,
                                          const SaddleState& warm, const SolverConfig& inner, const OuterConfig& c,
                                          std::vector<double>& adjoint) {
  if (is_ic(model.kind)) {
    // The previous adjoint solution seeds the next solve.
    OuterGradient og =
        grad_outer_objective(model, f, g, from_vector(model.kind, a), state.u, state.w, c.gradient, adjoint);
    adjoint = std::move(og.adjoint);
    return og.gradient;
  }
  // Rigid models: central differences of F, evaluated from the same warm start as F itself.
  std::vector<double> grad(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double h = c.fd_step * (1.0 + std::abs(a[i]));
    std::vector<double> lo = a, hi = a;
    lo[i] -= h;
    hi[i] += h;
    lo = project_box(c, lo);
    hi = project_box(c, hi);
    const double flo = evaluate_inner(model, f, g, lo, inner, warm, c).value;
    const double fhi = evaluate_inner(model, f, g, hi, inner, warm, c).value;
    grad[i] = (fhi - flo) / (hi[i] - lo[i]);
  }
  return grad;
}

inline Eigen::VectorXd as_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
}

inline StartResult run_start(const ModelSpec& model, const VideoVolume& f, const VideoVolume& g,
                             const ParamVector& start, const OuterConfig& c, std::size_t index = 0) {
  StartResult r;
  r.initial = start;
  const SolverConfig inner = inner_config(model.kind, c);
  const auto project = [&](std::vector<double> v) { return project_box(c, std::move(v)); };

  // PDHGM mode: every inner solve of this start is warm-started from one anchor state (the
  // inner solution at the initial parameters), which keeps F a fixed function of the
  // parameters. Smoothed mode: F is fixed by the Newton tolerance, and Newton restarts
  // from the current iterate.
  std::vector<double> a = project(to_vector(start));
  const bool smoothed = c.inner_solve == InnerSolve::smoothed;
  SaddleState anchor = initial_state(f);
  if (!smoothed) anchor = evaluate_inner(model, f, g, a, inner, anchor, c).state;
  InnerEval cur = evaluate_inner(model, f, g, a, inner, anchor, c, smoothed);
  const auto warm = [&]() -> const SaddleState& { return smoothed ? cur.state : anchor; };
  std::vector<double> adjoint;
  std::vector<double> grad = outer_gradient(model, f, g, a, cur.state, warm(), inner, c, adjoint);
  const auto scaled_identity = [&](const std::vector<double>& gv) {
    const double s = std::max(1.0, as_eigen(gv).norm());
    return Eigen::MatrixXd(s * Eigen::MatrixXd::Identity(static_cast<long>(gv.size()), static_cast<long>(gv.size())));
  };
  Eigen::MatrixXd b = scaled_identity(grad);
  const auto record = [&](TraceEntry e) {
    if (c.on_trace) c.on_trace(index, e);
    r.trace.push_back(std::move(e));
  };
  record({0, a, cur.value, 0.0, true});
  r.status = "max_iterations";

  for (std::size_t it = 1; it <= c.max_iterations; ++it) {
    std::optional<InnerEval> last;
    const auto objective = [&](const std::vector<double>& trial) {
      last = evaluate_inner(model, f, g, trial, inner, warm(), c);
      return last->value;
    };
    const auto direction = [&] {
      const Eigen::VectorXd d = b.llt().solve(-as_eigen(grad));
      return std::vector<double>(d.data(), d.data() + d.size());
    };

    // A step shorter than rho ||a|| would already satisfy the stopping test.
    const double floor = c.rho * as_eigen(a).norm();
    ArmijoResult ls = armijo_search(objective, a, cur.value, direction(), grad, c.armijo_c, project, floor);
    if (!ls.accepted && !ls.below_floor) {
      for (const auto& t : ls.trials) record({it, a, t.value, t.step, false});
      // One steepest-descent retry from a reset quasi-Hessian.
      b = scaled_identity(grad);
      ls = armijo_search(objective, a, cur.value, direction(), grad, c.armijo_c, project, floor);
    }
    for (std::size_t k = 0; k + 1 < ls.trials.size() || (!ls.accepted && k < ls.trials.size()); ++k)
      record({it, a, ls.trials[k].value, ls.trials[k].step, false});
    if (!ls.accepted) {
      r.status = ls.below_floor ? "converged" : "line_search_failed";
      break;
    }

    record({it, ls.point, ls.value, ls.step, true});
    r.iterations = it;
    std::vector<double> next = ls.point;
    InnerEval next_eval = std::move(*last);
    std::vector<double> next_grad = outer_gradient(model, f, g, next, next_eval.state, smoothed ? next_eval.state : anchor, inner, c, adjoint);
    bfgs_update(b, as_eigen(next) - as_eigen(a), as_eigen(next_grad) - as_eigen(grad));

    const bool done = stop_check(next, a, c.rho);
    a = std::move(next);
    cur = std::move(next_eval);
    grad = std::move(next_grad);
    if (done) {
      r.status = "converged";
      break;
    }
  }

  r.final_params = from_vector(model.kind, a);
  r.value = cur.value;
  r.u = cur.state.u;
  r.w = cur.state.w;
  r.psnr = psnr(r.u, g);
  r.ssim = ssim(r.u, g);
  r.ok = true;
  return r;
}

}  // namespace detail

/// Bilevel learning: BFGS from every multistart sample, keeping the start whose
/// optimised parameters give the best PSNR (ties: lexicographically smallest parameters).
/// Failed starts are recorded and skipped; throws SolverError only if every start fails.
inline LearnResult learn(const ModelSpec& model, const VideoVolume& f, const VideoVolume& g, const OuterConfig& c) {
  require_same_dims(f.dims(), g.dims(), "learn");
  if (!(c.armijo_c > 0.0 && c.armijo_c < 1.0)) throw std::invalid_argument("Armijo constant must lie in (0, 1)");
  if (!(c.rho > 0.0)) throw std::invalid_argument("stopping ratio must be positive");
  if (!(c.alpha_min < c.alpha_max) || !(c.kappa_min < c.kappa_max)) throw std::invalid_argument("empty box");
  if (c.starts == 0) throw std::invalid_argument("at least one start is required");

  const std::vector<ParamVector> starts = sample_starts(model.kind, c.starts, c.seed, c);
  std::vector<StartResult> results(starts.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t k = next++; k < starts.size(); k = next++) {
      try {
        results[k] = detail::run_start(model, f, g, starts[k], c, k);
      } catch (const std::exception& e) {
        results[k] = StartResult{};
        results[k].initial = starts[k];
        results[k].status = std::string("failed: ") + e.what();
      }
    }
  };
  const unsigned threads = std::max(1U, std::min<unsigned>(c.threads, static_cast<unsigned>(starts.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < results.size(); ++k) {
    if (!results[k].ok) continue;
    if (!best) {
      best = k;
      continue;
    }
    const StartResult& a = results[k];
    const StartResult& b = results[*best];
    if (a.psnr > b.psnr || (a.psnr == b.psnr && to_vector(a.final_params) < to_vector(b.final_params))) best = k;
  }
  if (!best) throw SolverError("every start failed; first error: " + results.front().status);

  LearnResult out;
  out.model = model.kind;
  out.best_start = *best;
  const StartResult& r = results[*best];
  out.params = r.final_params;
  out.normalized = normalize_kappa(model.kind, r.final_params);
  out.opt_value = r.value;
  out.psnr = r.psnr;
  out.ssim = r.ssim;
  out.u = r.u;
  out.w = r.w;
  out.starts = std::move(results);
  return out;
}

}  // namespace dynreg
