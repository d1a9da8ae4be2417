#pragma once

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynreg/grid_ops.hpp"
#include "dynreg/krylov.hpp"
#include "dynreg/pdhgm.hpp"
#include "dynreg/regularizers.hpp"
#include "dynreg/volume.hpp"

namespace dynreg {

enum class Preconditioner { none, jacobi, incomplete_cholesky };

struct KrylovOptions {
  double tolerance = 1e-8;
  std::size_t max_iterations = 20000;
  Preconditioner preconditioner = Preconditioner::jacobi;
};

/// Largest grid (in voxels) for which the sparse Hessian is assembled for incomplete Cholesky.
inline constexpr std::size_t max_assembled_voxels = 64 * 64 * 64;

/// The smoothed optimality system S = grad_{(u,w)} J_{gamma,eps} at a fixed point
/// (u, w, params), with its Jacobian (the Hessian of J) and parameter derivatives.
///
/// Unknowns are stacked as (u, w) for IC models and as u alone for rigid models.
/// Hessian applications reuse internal scratch buffers: one instance per thread.
class SmoothedSystem {
 public:
  SmoothedSystem(const ModelSpec& model, const ParamVector& params, const VideoVolume& f, const VideoVolume& u,
                 const VideoVolume& w)
      : model_(model),
        params_(params),
        dims_(f.dims()),
        ic_(is_ic(model.kind)),
        quad1_(first_term_quadratic(model.kind)),
        geo_(term_geometry(model.kind, params)),
        f_(f),
        u_(u),
        w_(ic_ ? w : VideoVolume(f.dims())),
        z1_(dims_),
        z2_(dims_),
        y1_(dims_),
        y2_(dims_),
        m2_(dims_),
        scratch_(dims_),
        arg_(dims_.size()),
        t1_(dims_.size()),
        t2_(dims_.size()) {
    validate(model.kind, params);
    if (!(model.gamma > 0.0)) throw std::invalid_argument("smoothed system requires gamma > 0");
    require_same_dims(u.dims(), f.dims(), "SmoothedSystem");
    if (ic_) require_same_dims(w.dims(), f.dims(), "SmoothedSystem");

    const std::size_t n = dims_.size();
    if (ic_) {
      for (std::size_t i = 0; i < n; ++i) arg_[i] = u_[i] - w_[i];
      gradient_into(dims_, arg_, geo_.first, z1_);
      gradient_into(dims_, w_.span(), geo_.second, z2_);
    } else {
      gradient_into(dims_, u_.span(), geo_.first, z1_);
      gradient_into(dims_, u_.span(), geo_.second, z2_);
    }
    if (quad1_) {
      y1_ = z1_;
    } else {
      psi1_into(z1_, model.gamma, model.epsilon, y1_);
      m1_ = MatrixField3(dims_);
      psi2_into(z1_, model.gamma, model.epsilon, m1_);
    }
    psi1_into(z2_, model.gamma, model.epsilon, y2_);
    psi2_into(z2_, model.gamma, model.epsilon, m2_);
  }

  [[nodiscard]] std::size_t size() const noexcept { return ic_ ? 2 * dims_.size() : dims_.size(); }
  [[nodiscard]] const Dims& dims() const noexcept { return dims_; }
  [[nodiscard]] bool ic() const noexcept { return ic_; }

  /// Stacked residual (S1, S2).
  [[nodiscard]] std::vector<double> residual() const {
    const std::size_t n = dims_.size();
    std::vector<double> s(size(), 0.0);
    std::vector<double> d1(n, 0.0), d2(n, 0.0);
    divergence_add(y1_, geo_.first, params_.alpha1, d1);
    divergence_add(y2_, geo_.second, params_.alpha2, d2);
    if (ic_) {
      const double m = sum(w_.span());
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = u_[i] - f_[i] - d1[i];
        s[n + i] = d1[i] - d2[i] + m;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) s[i] = u_[i] - f_[i] - d1[i] - d2[i];
    }
    return s;
  }

  /// y = H x, H the Hessian of the smoothed energy (symmetric).
  void apply(std::span<const double> x, std::span<double> y) const {
    const std::size_t n = dims_.size();
    std::fill(t1_.begin(), t1_.end(), 0.0);
    std::fill(t2_.begin(), t2_.end(), 0.0);
    if (ic_) {
      for (std::size_t i = 0; i < n; ++i) arg_[i] = x[i] - x[n + i];
      gradient_into(dims_, arg_, geo_.first, scratch_);
    } else {
      gradient_into(dims_, x.first(n), geo_.first, scratch_);
    }
    if (!quad1_) apply_blocks(m1_, scratch_);
    divergence_add(scratch_, geo_.first, -params_.alpha1, t1_);

    gradient_into(dims_, ic_ ? x.subspan(n, n) : x.first(n), geo_.second, scratch_);
    apply_blocks(m2_, scratch_);
    divergence_add(scratch_, geo_.second, -params_.alpha2, t2_);

    if (ic_) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += x[n + i];
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = x[i] + t1_[i];
        y[n + i] = -t1_[i] + t2_[i] + m;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + t1_[i] + t2_[i];
    }
  }

  /// Exact diagonal of the Hessian.
  [[nodiscard]] std::vector<double> diagonal() const {
    const std::size_t n = dims_.size();
    const std::vector<double> k1 = stencil_diagonal(quad1_ ? nullptr : &m1_, geo_.first);
    const std::vector<double> k2 = stencil_diagonal(&m2_, geo_.second);
    std::vector<double> d(size());
    for (std::size_t i = 0; i < n; ++i) {
      if (ic_) {
        d[i] = 1.0 + params_.alpha1 * k1[i];
        d[n + i] = params_.alpha1 * k1[i] + params_.alpha2 * k2[i] + 1.0;
      } else {
        d[i] = 1.0 + params_.alpha1 * k1[i] + params_.alpha2 * k2[i];
      }
    }
    return d;
  }

  /// Sparse Hessian with the dense pinning block (sum w) 1 replaced by its diagonal.
  [[nodiscard]] Eigen::SparseMatrix<double> assemble_compensated() const {
    const std::size_t n = dims_.size();
    const Eigen::SparseMatrix<double> k1 = params_.alpha1 * stencil_matrix(quad1_ ? nullptr : &m1_, geo_.first);
    const Eigen::SparseMatrix<double> k2 = params_.alpha2 * stencil_matrix(&m2_, geo_.second);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(4 * k1.nonZeros() + k2.nonZeros()) + 2 * n);
    const auto emit = [&](const Eigen::SparseMatrix<double>& k, long ro, long co, double s) {
      for (int c = 0; c < k.outerSize(); ++c)
        for (Eigen::SparseMatrix<double>::InnerIterator it(k, c); it; ++it)
          trip.emplace_back(static_cast<int>(it.row() + ro), static_cast<int>(it.col() + co), s * it.value());
    };
    const long nn = static_cast<long>(n);
    for (std::size_t i = 0; i < n; ++i) trip.emplace_back(static_cast<int>(i), static_cast<int>(i), 1.0);
    if (ic_) {
      emit(k1, 0, 0, 1.0);
      emit(k1, 0, nn, -1.0);
      emit(k1, nn, 0, -1.0);
      emit(k1, nn, nn, 1.0);
      emit(k2, nn, nn, 1.0);
      for (std::size_t i = 0; i < n; ++i)
        trip.emplace_back(static_cast<int>(n + i), static_cast<int>(n + i), 1.0);
    } else {
      emit(k1, 0, 0, 1.0);
      emit(k2, 0, 0, 1.0);
    }
    Eigen::SparseMatrix<double> h(static_cast<long>(size()), static_cast<long>(size()));
    h.setFromTriplets(trip.begin(), trip.end());
    return h;
  }

  /// Columns of dS/d(alpha1, alpha2, kappa) at fixed (u, w). IC models only.
  [[nodiscard]] std::vector<std::vector<double>> parameter_columns() const {
    if (!ic_) throw std::invalid_argument("parameter_columns: analytic derivatives exist for IC models only");
    const std::size_t n = dims_.size();
    const double a1 = params_.alpha1, a2 = params_.alpha2;
    std::vector<std::vector<double>> cols(3, std::vector<double>(2 * n, 0.0));

    std::vector<double> d1(n, 0.0), d2(n, 0.0);
    divergence_add(y1_, geo_.first, 1.0, d1);
    divergence_add(y2_, geo_.second, 1.0, d2);
    for (std::size_t i = 0; i < n; ++i) {
      cols[0][i] = -d1[i];
      cols[0][n + i] = d1[i];
      cols[1][n + i] = -d2[i];
    }

    // kappa enters through grad_k = grad_0 + kappa * D' and grad_{1-k} = grad_1 - kappa * D'.
    std::vector<double> tau1(n, 0.0), tau2(n, 0.0);
    VectorField3 dv(dims_);
    gradient_into(dims_, arg_of_first(), dkappa_weights(), dv);
    if (!quad1_) apply_blocks(m1_, dv);
    divergence_add(y1_, dkappa_weights(), -a1, tau1);
    divergence_add(dv, geo_.first, -a1, tau1);

    VectorField3 dw(dims_);
    gradient_into(dims_, w_.span(), dkappa_weights(), dw);
    apply_blocks(m2_, dw);
    divergence_add(y2_, dkappa_weights(), a2, tau2);
    divergence_add(dw, geo_.second, a2, tau2);

    for (std::size_t i = 0; i < n; ++i) {
      cols[2][i] = tau1[i];
      cols[2][n + i] = -tau1[i] + tau2[i];
    }
    return cols;
  }

 private:
  static void apply_blocks(const MatrixField3& m, VectorField3& g) noexcept {
    for (std::size_t i = 0; i < g.size(); ++i) {
      double a, b, c;
      m.apply_at(i, g.dx[i], g.dy[i], g.dt[i], a, b, c);
      g.dx[i] = a, g.dy[i] = b, g.dt[i] = c;
    }
  }

  [[nodiscard]] std::vector<double> arg_of_first() const {
    if (!ic_) return u_.values();
    std::vector<double> v(dims_.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = u_[i] - w_[i];
    return v;
  }

  // diag of grad^T M grad; M == nullptr means identity blocks.
  [[nodiscard]] std::vector<double> stencil_diagonal(const MatrixField3* m, AxisWeights wt) const {
    const Dims& d = dims_;
    const std::size_t sy = d.w, st = d.w * d.h;
    std::vector<double> out(d.size(), 0.0);
    const auto entry = [&](const std::vector<double>& comp, std::size_t i) { return m ? comp[i] : 1.0; };
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) {
          const std::size_t i = d.index(x, y, t);
          const double ex = x + 1 < d.w ? -wt.x : 0.0;
          const double ey = y + 1 < d.h ? -wt.y : 0.0;
          const double et = t + 1 < d.t ? -wt.t : 0.0;
          double s;
          if (m) {
            double a, b, c;
            m->apply_at(i, ex, ey, et, a, b, c);
            s = ex * a + ey * b + et * c;
          } else {
            s = ex * ex + ey * ey + et * et;
          }
          if (x > 0) s += wt.x * wt.x * (m ? entry(m->xx, i - 1) : 1.0);
          if (y > 0) s += wt.y * wt.y * (m ? entry(m->yy, i - sy) : 1.0);
          if (t > 0) s += wt.t * wt.t * (m ? entry(m->tt, i - st) : 1.0);
          out[i] = s;
        }
    return out;
  }

  // grad^T M grad as a sparse N x N matrix.
  [[nodiscard]] Eigen::SparseMatrix<double> stencil_matrix(const MatrixField3* m, AxisWeights wt) const {
    const Dims& d = dims_;
    const long n = static_cast<long>(d.size());
    std::vector<Eigen::Triplet<double>> gt;
    gt.reserve(6 * d.size());
    const std::size_t strides[3] = {1, d.w, d.w * d.h};
    const double weights[3] = {wt.x, wt.y, wt.t};
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) {
          const std::size_t i = d.index(x, y, t);
          const bool interior[3] = {x + 1 < d.w, y + 1 < d.h, t + 1 < d.t};
          for (int c = 0; c < 3; ++c) {
            if (!interior[c] || weights[c] == 0.0) continue;
            const int row = static_cast<int>(static_cast<long>(c) * n + static_cast<long>(i));
            gt.emplace_back(row, static_cast<int>(i), -weights[c]);
            gt.emplace_back(row, static_cast<int>(i + strides[c]), weights[c]);
          }
        }
    Eigen::SparseMatrix<double> g(3 * n, n);
    g.setFromTriplets(gt.begin(), gt.end());

    std::vector<Eigen::Triplet<double>> mt;
    mt.reserve(9 * d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double blk[3][3] = {
          {m ? m->xx[i] : 1.0, m ? m->xy[i] : 0.0, m ? m->xt[i] : 0.0},
          {m ? m->xy[i] : 0.0, m ? m->yy[i] : 1.0, m ? m->yt[i] : 0.0},
          {m ? m->xt[i] : 0.0, m ? m->yt[i] : 0.0, m ? m->tt[i] : 1.0},
      };
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          if (blk[a][b] != 0.0)
            mt.emplace_back(static_cast<int>(a * n + static_cast<long>(i)), static_cast<int>(b * n + static_cast<long>(i)),
                            blk[a][b]);
    }
    Eigen::SparseMatrix<double> mm(3 * n, 3 * n);
    mm.setFromTriplets(mt.begin(), mt.end());
    Eigen::SparseMatrix<double> k = Eigen::SparseMatrix<double>(g.transpose()) * mm * g;
    return k;
  }

  ModelSpec model_;
  ParamVector params_;
  Dims dims_;
  bool ic_;
  bool quad1_;
  TermGeometry geo_;
  VideoVolume f_, u_, w_;
  VectorField3 z1_, z2_, y1_, y2_;
  MatrixField3 m1_, m2_;
  mutable VectorField3 scratch_;
  mutable std::vector<double> arg_, t1_, t2_;
};

namespace detail {

inline std::string sci(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

inline std::vector<double> stack(const VideoVolume& a, const VideoVolume* b) {
  std::vector<double> out(a.values());
  if (b) out.insert(out.end(), b->values().begin(), b->values().end());
  return out;
}

inline std::pair<VideoVolume, VideoVolume> unstack(const Dims& d, std::span<const double> x) {
  const std::size_t n = d.size();
  VideoVolume a(d, std::vector<double>(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n)));
  VideoVolume b(d);
  if (x.size() >= 2 * n) b = VideoVolume(d, std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(n), x.end()));
  return {std::move(a), std::move(b)};
}

}  // namespace detail

/// (S1, S2) of the smoothed Euler-Lagrange system. S2 is zero for rigid models.
inline std::pair<VideoVolume, VideoVolume> kkt_residual(const ModelSpec& model, const VideoVolume& u,
                                                        const VideoVolume& w, const ParamVector& params,
                                                        const VideoVolume& f) {
  const SmoothedSystem sys(model, params, f, u, w);
  return detail::unstack(f.dims(), sys.residual());
}

/// Matrix-free dS/d(u,w) applied to (du, dw).
inline std::pair<VideoVolume, VideoVolume> apply_hessian(const ModelSpec& model, const VideoVolume& u,
                                                         const VideoVolume& w, const ParamVector& params,
                                                         const VideoVolume& f, const VideoVolume& du,
                                                         const VideoVolume& dw) {
  const SmoothedSystem sys(model, params, f, u, w);
  const std::vector<double> x = detail::stack(du, sys.ic() ? &dw : nullptr);
  std::vector<double> y(x.size());
  sys.apply(x, y);
  return detail::unstack(f.dims(), y);
}

/// Columns of dS/d(alpha1, alpha2, kappa) as (u, w) field pairs.
inline std::vector<std::pair<VideoVolume, VideoVolume>> sensitivity_rhs(const ModelSpec& model,
                                                                        const VideoVolume& u,
                                                                        const VideoVolume& w,
                                                                        const ParamVector& params,
                                                                        const VideoVolume& f) {
  const SmoothedSystem sys(model, params, f, u, w);
  std::vector<std::pair<VideoVolume, VideoVolume>> out;
  for (const auto& c : sys.parameter_columns()) out.push_back(detail::unstack(f.dims(), c));
  return out;
}

/// Solves H x = rhs with preconditioned CG. `x` may carry an initial guess.
inline KrylovResult solve_linear(const SmoothedSystem& sys, std::span<const double> rhs, std::span<double> x,
                                 const KrylovOptions& opt) {
  const auto apply = [&](std::span<const double> a, std::span<double> b) { sys.apply(a, b); };
  switch (opt.preconditioner) {
    case Preconditioner::none:
      return pcg(apply, [](std::span<const double> r, std::span<double> z) { std::copy(r.begin(), r.end(), z.begin()); },
                 rhs, x, opt.tolerance, opt.max_iterations);
    case Preconditioner::jacobi: {
      std::vector<double> inv = sys.diagonal();
      for (double& v : inv) v = 1.0 / v;
      return pcg(
          apply,
          [&](std::span<const double> r, std::span<double> z) {
            for (std::size_t i = 0; i < r.size(); ++i) z[i] = inv[i] * r[i];
          },
          rhs, x, opt.tolerance, opt.max_iterations);
    }
    case Preconditioner::incomplete_cholesky: {
      if (sys.dims().size() > max_assembled_voxels)
        throw std::invalid_argument("incomplete Cholesky preconditioning is limited to 64^3 voxels");
      Eigen::IncompleteCholesky<double, Eigen::Lower, Eigen::AMDOrdering<int>> ic;
      ic.compute(sys.assemble_compensated());
      if (ic.info() != Eigen::Success) throw SolverError("incomplete Cholesky factorisation failed");
      Eigen::VectorXd rv(static_cast<long>(rhs.size()));
      return pcg(
          apply,
          [&](std::span<const double> r, std::span<double> z) {
            for (std::size_t i = 0; i < r.size(); ++i) rv[static_cast<long>(i)] = r[i];
            const Eigen::VectorXd zv = ic.solve(rv);
            for (std::size_t i = 0; i < z.size(); ++i) z[i] = zv[static_cast<long>(i)];
          },
          rhs, x, opt.tolerance, opt.max_iterations);
    }
  }
  throw std::logic_error("unknown preconditioner");
}

struct AdjointSolution {
  VideoVolume lambda_u, lambda_w;
  KrylovResult krylov;
};

/// Solves H lambda = rhs. H is symmetric, so the transposed solve is a plain solve.
inline AdjointSolution solve_adjoint(const ModelSpec& model, const VideoVolume& u, const VideoVolume& w,
                                     const ParamVector& params, const VideoVolume& f, const VideoVolume& rhs_u,
                                     const VideoVolume& rhs_w, const KrylovOptions& opt = {}) {
  const SmoothedSystem sys(model, params, f, u, w);
  const std::vector<double> b = detail::stack(rhs_u, sys.ic() ? &rhs_w : nullptr);
  std::vector<double> x(b.size(), 0.0);
  const KrylovResult kr = solve_linear(sys, b, x, opt);
  if (!kr.converged)
    throw SolverError("adjoint solve did not converge: relative residual " + detail::sci(kr.relative_residual) +
                      " after " + std::to_string(kr.iterations) + " iterations");
  auto [lu, lw] = detail::unstack(f.dims(), x);
  return {std::move(lu), std::move(lw), kr};
}

enum class GradientMode { adjoint, forward };

struct GradientOptions {
  GradientMode mode = GradientMode::adjoint;
  KrylovOptions krylov{};
};

struct OuterGradient {
  std::vector<double> gradient;  // d/d(alpha1, alpha2, kappa) of (1/2)||u - g||^2
  KrylovResult krylov;           // worst of the solves performed
  std::vector<double> adjoint;   // lambda, stacked as (u, w); adjoint mode only
};

/// Gradient of F = (1/2)||R(params) - g||^2 through the implicit function theorem on
/// the smoothed system at (u, w): grad F = -(dS/dparams)^T lambda with H lambda = (u - g, 0).
/// `lambda0`, when non-empty, is the initial guess for the adjoint solve.
inline OuterGradient grad_outer_objective(const ModelSpec& model, const VideoVolume& f, const VideoVolume& g,
                                          const ParamVector& params, const VideoVolume& u, const VideoVolume& w,
                                          const GradientOptions& opt = {}, std::span<const double> lambda0 = {}) {
  if (!is_ic(model.kind)) throw std::invalid_argument("grad_outer_objective: IC models only");
  require_same_dims(g.dims(), f.dims(), "grad_outer_objective");
  const SmoothedSystem sys(model, params, f, u, w);
  const std::size_t n = f.size();
  const auto cols = sys.parameter_columns();
  OuterGradient out;
  out.gradient.assign(cols.size(), 0.0);

  const auto check = [&](const KrylovResult& kr) {
    if (!kr.converged)
      throw SolverError("sensitivity solve did not converge: relative residual " +
                        detail::sci(kr.relative_residual));
    if (kr.relative_residual >= out.krylov.relative_residual) {
      out.krylov.relative_residual = kr.relative_residual;
    }
    out.krylov.iterations += kr.iterations;
    out.krylov.converged = true;
  };

  if (opt.mode == GradientMode::adjoint) {
    std::vector<double> b(2 * n, 0.0), lambda(2 * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) b[i] = u[i] - g[i];
    if (lambda0.size() == lambda.size()) std::copy(lambda0.begin(), lambda0.end(), lambda.begin());
    const KrylovResult kr = solve_linear(sys, b, lambda, opt.krylov);
    check(kr);
    for (std::size_t k = 0; k < cols.size(); ++k) out.gradient[k] = -dot(cols[k], lambda);
    out.adjoint = std::move(lambda);
  } else {
    for (std::size_t k = 0; k < cols.size(); ++k) {
      std::vector<double> z(2 * n, 0.0);
      const KrylovResult kr = solve_linear(sys, cols[k], z, opt.krylov);
      check(kr);
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += z[i] * (u[i] - g[i]);
      out.gradient[k] = -s;
    }
  }
  return out;
}

struct NewtonOptions {
  double tolerance = 1e-10;  // on the Euclidean norm of the stacked residual
  std::size_t max_iterations = 200;
  // Linear solves use the relative forcing term min(krylov.tolerance, ||S||).
  KrylovOptions krylov{0.1, 20000, Preconditioner::jacobi};
};

struct SmoothedSolution {
  VideoVolume u, w;
  double residual_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Minimises the smoothed energy J_{gamma,eps} by damped Newton-CG from (u0, w0).
inline SmoothedSolution solve_smoothed_inner(const ModelSpec& model, const VideoVolume& f, const ParamVector& params,
                                             const VideoVolume& u0, const VideoVolume& w0,
                                             const NewtonOptions& opt = {}) {
  validate(model.kind, params);
  const bool ic = is_ic(model.kind);
  SmoothedSolution sol{u0, ic ? w0 : VideoVolume(f.dims()), 0.0, 0, false};
  const std::size_t n = f.size();

  for (;;) {
    const SmoothedSystem sys(model, params, f, sol.u, sol.w);
    const std::vector<double> s = sys.residual();
    sol.residual_norm = norm2(s);
    if (sol.residual_norm <= opt.tolerance) {
      sol.converged = true;
      return sol;
    }
    if (sol.iterations >= opt.max_iterations) return sol;
    ++sol.iterations;

    std::vector<double> rhs(s.size()), step(s.size(), 0.0);
    for (std::size_t i = 0; i < s.size(); ++i) rhs[i] = -s[i];
    KrylovOptions kopt = opt.krylov;
    // Forcing min(cap, ||S||), but never tighter than what reaching the tolerance needs.
    kopt.tolerance = std::max({1e-12, std::min(kopt.tolerance, sol.residual_norm),
                               std::min(kopt.tolerance, 0.5 * opt.tolerance / sol.residual_norm)});
    solve_linear(sys, rhs, step, kopt);

    const double e0 = energy_smoothed(model, sol.u, sol.w, params, f);
    const double slope = dot(s, step);
    bool accepted = false;
    for (double t = 1.0; t > 1e-12; t *= 0.5) {
      VideoVolume u = sol.u, w = sol.w;
      for (std::size_t i = 0; i < n; ++i) u[i] += t * step[i];
      if (ic)
        for (std::size_t i = 0; i < n; ++i) w[i] += t * step[n + i];
      const double e = energy_smoothed(model, u, w, params, f);
      bool ok = e <= e0 + 1e-4 * t * slope;
      if (!ok && std::abs(e - e0) <= 1e-13 * std::abs(e0)) {
        // Below energy resolution: accept when the residual shrinks.
        const SmoothedSystem trial(model, params, f, u, w);
        ok = norm2(trial.residual()) < sol.residual_norm;
      }
      if (ok) {
        sol.u = std::move(u);
        sol.w = std::move(w);
        accepted = true;
        break;
      }
    }
    if (!accepted) return sol;
  }
}

}  // namespace dynreg
