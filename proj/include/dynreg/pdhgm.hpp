#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

#include "dynreg/grid_ops.hpp"
#include "dynreg/regularizers.hpp"
#include "dynreg/volume.hpp"

namespace dynreg {

/// Thrown when an iterative solver produces non-finite values or misses its target.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Upper bound on ||A||^2 for every saddle operator built here.
inline constexpr double saddle_norm_bound = 24.0;

/// Primal (u, w), duals (p, q) and the extrapolated primal (u_bar, w_bar).
/// Rigid models keep w identically zero.
struct SaddleState {
  VideoVolume u, w, u_bar, w_bar;
  VectorField3 p, q;
  std::size_t iteration = 0;
};

inline SaddleState initial_state(const VideoVolume& f) {
  SaddleState s;
  s.u = f;
  s.w = VideoVolume(f.dims());
  s.u_bar = f;
  s.w_bar = s.w;
  s.p = VectorField3(f.dims());
  s.q = VectorField3(f.dims());
  return s;
}

struct SolverConfig {
  std::size_t iterations = 200;
  double sigma = 0.99 / std::sqrt(saddle_norm_bound);
  double tau = 0.99 / std::sqrt(saddle_norm_bound);
  // Step-size schedule for a 1-strongly convex primal (the data term). Only the rigid
  // models are strongly convex in every primal variable.
  bool accelerated = false;
  std::optional<SaddleState> warm_start;
};

/// 50 accelerated iterations where the schedule applies (rigid models), 200 plain ones otherwise.
inline SolverConfig default_solver_config(ModelKind kind) {
  SolverConfig c;
  if (!is_ic(kind)) {
    c.accelerated = true;
    c.iterations = 50;
  }
  return c;
}

/// Saddle operator acting on stacked (u, w) and returning stacked (p, q), each field
/// laid out as (dx, dy, dt). IC: A = [grad_k, -grad_k; 0, grad_{1-k}]. Rigid: A u = (grad u, Dt u).
inline LinearOperator build_saddle_operator(ModelKind kind, const ParamVector& params, const Dims& d) {
  validate(kind, params);
  const TermGeometry geo = term_geometry(kind, params);
  const std::size_t n = d.size();
  const bool ic = is_ic(kind);
  LinearOperator op;
  op.cols = ic ? 2 * n : n;
  op.rows = 6 * n;
  op.apply = [=](std::span<const double> x, std::span<double> y) {
    VectorField3 g(d);
    auto store = [&](std::size_t block) {
      std::copy(g.dx.begin(), g.dx.end(), y.begin() + static_cast<std::ptrdiff_t>((3 * block + 0) * n));
      std::copy(g.dy.begin(), g.dy.end(), y.begin() + static_cast<std::ptrdiff_t>((3 * block + 1) * n));
      std::copy(g.dt.begin(), g.dt.end(), y.begin() + static_cast<std::ptrdiff_t>((3 * block + 2) * n));
    };
    if (ic) {
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] - x[n + i];
      gradient_into(d, v, geo.first, g);
      store(0);
      gradient_into(d, x.subspan(n, n), geo.second, g);
      store(1);
    } else {
      gradient_into(d, x.first(n), geo.first, g);
      store(0);
      gradient_into(d, x.first(n), geo.second, g);
      store(1);
    }
  };
  op.apply_adjoint = [=](std::span<const double> y, std::span<double> x) {
    auto load = [&](std::size_t block) {
      VectorField3 g(d);
      std::copy_n(y.begin() + static_cast<std::ptrdiff_t>((3 * block + 0) * n), n, g.dx.begin());
      std::copy_n(y.begin() + static_cast<std::ptrdiff_t>((3 * block + 1) * n), n, g.dy.begin());
      std::copy_n(y.begin() + static_cast<std::ptrdiff_t>((3 * block + 2) * n), n, g.dt.begin());
      return g;
    };
    const VectorField3 p = load(0), q = load(1);
    std::fill(x.begin(), x.end(), 0.0);
    if (ic) {
      // A^T (p, q) = (-div_k p, div_k p - div_{1-k} q)
      divergence_add(p, geo.first, -1.0, x.first(n));
      divergence_add(p, geo.first, 1.0, x.subspan(n, n));
      divergence_add(q, geo.second, -1.0, x.subspan(n, n));
    } else {
      divergence_add(p, geo.first, -1.0, x.first(n));
      divergence_add(q, geo.second, -1.0, x.first(n));
    }
  };
  return op;
}

namespace detail {

inline void project_ball(VectorField3& q, double radius) noexcept {
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double n = q.norm_at(i);
    if (n > radius) {
      const double s = n > 0.0 ? radius / n : 0.0;
      q.dx[i] *= s, q.dy[i] *= s, q.dt[i] *= s;
    }
  }
}

inline void scale_field(VectorField3& q, double s) noexcept {
  for (std::size_t i = 0; i < q.size(); ++i) q.dx[i] *= s, q.dy[i] *= s, q.dt[i] *= s;
}

inline void add_scaled(VectorField3& q, double s, const VectorField3& g) noexcept {
  for (std::size_t i = 0; i < q.size(); ++i) q.dx[i] += s * g.dx[i], q.dy[i] += s * g.dy[i], q.dt[i] += s * g.dt[i];
}

struct PdhgmWorkspace {
  VectorField3 grad;
  std::vector<double> tmp, div1, div2;
  explicit PdhgmWorkspace(const Dims& d) : grad(d), tmp(d.size()), div1(d.size()), div2(d.size()) {}
};

// One primal-dual iteration in place with over-relaxation `theta`.
inline void pdhgm_step(ModelKind kind, const TermGeometry& geo, SaddleState& s, const VideoVolume& f,
                       const ParamVector& params, double sigma, double tau, double theta, PdhgmWorkspace& ws) {
  const Dims& d = f.dims();
  const std::size_t n = d.size();
  const bool ic = is_ic(kind);

  // Dual ascent.
  if (ic) {
    for (std::size_t i = 0; i < n; ++i) ws.tmp[i] = s.u_bar[i] - s.w_bar[i];
    gradient_into(d, ws.tmp, geo.first, ws.grad);
  } else {
    gradient_into(d, s.u_bar.span(), geo.first, ws.grad);
  }
  add_scaled(s.p, sigma, ws.grad);
  if (first_term_quadratic(kind)) {
    // prox of sigma * (1/(2 alpha1)) ||p||^2
    scale_field(s.p, params.alpha1 > 0.0 ? 1.0 / (1.0 + sigma / params.alpha1) : 0.0);
  } else {
    project_ball(s.p, params.alpha1);
  }
  gradient_into(d, ic ? s.w_bar.span() : s.u_bar.span(), geo.second, ws.grad);
  add_scaled(s.q, sigma, ws.grad);
  project_ball(s.q, params.alpha2);

  // Primal descent.
  std::fill(ws.div1.begin(), ws.div1.end(), 0.0);
  std::fill(ws.div2.begin(), ws.div2.end(), 0.0);
  divergence_add(s.p, geo.first, 1.0, ws.div1);
  divergence_add(s.q, geo.second, 1.0, ws.div2);

  const double inv = 1.0 / (1.0 + tau);
  for (std::size_t i = 0; i < n; ++i) {
    const double old = s.u[i];
    const double back = ic ? ws.div1[i] : ws.div1[i] + ws.div2[i];
    const double next = (old + tau * back + tau * f[i]) * inv;
    s.u[i] = next;
    s.u_bar[i] = next + theta * (next - old);
  }
  if (ic) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ws.tmp[i] = s.w[i] - tau * ws.div1[i] + tau * ws.div2[i];
      m += ws.tmp[i];
    }
    // prox of tau * (1/2)(sum w)^2
    const double shift = tau * m / (1.0 + tau * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const double old = s.w[i];
      const double next = ws.tmp[i] - shift;
      s.w[i] = next;
      s.w_bar[i] = next + theta * (next - old);
    }
  }
  ++s.iteration;
}

inline void check_state(const SaddleState& s, const ModelSpec& model) {
  (void)model;
  if (!s.u.all_finite() || !s.w.all_finite() || !s.p.all_finite() || !s.q.all_finite())
    throw SolverError("PDHGM diverged: non-finite iterate at iteration " + std::to_string(s.iteration));
}

}  // namespace detail

/// One PDHGM iteration (dual ascent, primal descent, over-relaxation 1).
inline SaddleState prox_steps(const ModelSpec& model, SaddleState state, const VideoVolume& f,
                              const ParamVector& params, double sigma, double tau) {
  validate(model.kind, params);
  detail::PdhgmWorkspace ws(f.dims());
  detail::pdhgm_step(model.kind, term_geometry(model.kind, params), state, f, params, sigma, tau, 1.0, ws);
  return state;
}

/// Approximately minimises the unsmoothed inner problem (gamma and eps are not used here).
/// The IC primal also carries the pinning term (1/2)(sum w)^2, which fixes the additive
/// constant of w without changing u.
inline SaddleState pdhgm_solve(const ModelSpec& model, const VideoVolume& f, const ParamVector& params,
                               const SolverConfig& config) {
  validate(model.kind, params);
  if (!(config.sigma > 0.0) || !(config.tau > 0.0)) throw std::invalid_argument("step sizes must be positive");
  SaddleState s = config.warm_start ? *config.warm_start : initial_state(f);
  require_same_dims(s.u.dims(), f.dims(), "pdhgm_solve warm start");
  const TermGeometry geo = term_geometry(model.kind, params);
  detail::PdhgmWorkspace ws(f.dims());
  double sigma = config.sigma, tau = config.tau;
  for (std::size_t k = 0; k < config.iterations; ++k) {
    double theta = 1.0;
    if (config.accelerated) theta = 1.0 / std::sqrt(1.0 + 2.0 * tau);
    detail::pdhgm_step(model.kind, geo, s, f, params, sigma, tau, theta, ws);
    if (config.accelerated) {
      tau *= theta;
      sigma /= theta;
    }
    if ((k & 15U) == 15U || k + 1 == config.iterations) detail::check_state(s, model);
  }
  return s;
}

/// Partial primal-dual gap: the primal energy (with pinning for IC models) minus
/// min over u of the Lagrangian at the current w and duals. The full gap is infinite
/// whenever the w-block of A^T(p, q) is nonzero, so w is held fixed. Nonnegative for
/// feasible duals and zero at a saddle point. Returns +inf for infeasible duals.
inline double primal_dual_gap(const ModelSpec& model, const SaddleState& s, const VideoVolume& f,
                              const ParamVector& params) {
  validate(model.kind, params);
  const TermGeometry geo = term_geometry(model.kind, params);
  const std::size_t n = f.size();
  const bool ic = is_ic(model.kind);

  double primal = energy_unsmoothed(model, s.u, s.w, params, f);
  double lagrangian = 0.0;
  double pin = 0.0;
  if (ic) {
    const double m = sum(s.w.span());
    pin = 0.5 * m * m;
    primal += pin;
  }

  const auto infeasible = [](const VectorField3& q, double radius) {
    for (std::size_t i = 0; i < q.size(); ++i)
      if (q.norm_at(i) > radius * (1.0 + 1e-9) + 1e-300) return true;
    return false;
  };
  if (infeasible(s.q, params.alpha2)) return std::numeric_limits<double>::infinity();
  if (first_term_quadratic(model.kind)) {
    lagrangian -= params.alpha1 > 0.0 ? dot(s.p, s.p) / (2.0 * params.alpha1) : 0.0;
  } else if (infeasible(s.p, params.alpha1)) {
    return std::numeric_limits<double>::infinity();
  }

  std::vector<double> div1(n, 0.0), div2(n, 0.0);
  divergence_add(s.p, geo.first, 1.0, div1);
  divergence_add(s.q, geo.second, 1.0, div2);

  // min_u (1/2)||u - f||^2 + <a, u> = <f, a> - (1/2)||a||^2
  double fa = 0.0, aa = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = ic ? -div1[i] : -(div1[i] + div2[i]);
    fa += f[i] * a;
    aa += a * a;
  }
  lagrangian += fa - 0.5 * aa;
  if (ic) {
    double wa = 0.0;
    for (std::size_t i = 0; i < n; ++i) wa += s.w[i] * (div1[i] - div2[i]);
    lagrangian += wa + pin;
  }
  return primal - lagrangian;
}

struct Components {
  VideoVolume temporal;
  VideoVolume spatial;
};

/// Splits an IC solution into the pair (u - w, w). For kappa <= 1/2 the first element
/// is the part regularised mainly in time and carries the temporal label; the labels swap
/// for kappa > 1/2. The two parts always sum to u.
inline Components split_components(const VideoVolume& u, const VideoVolume& w, double kappa) {
  require_same_dims(u.dims(), w.dims(), "split_components");
  VideoVolume v = u - w;
  if (kappa <= 0.5) return {std::move(v), w};
  return {w, std::move(v)};
}

}  // namespace dynreg
