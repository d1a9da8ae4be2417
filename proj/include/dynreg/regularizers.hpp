#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "dynreg/grid_ops.hpp"
#include "dynreg/volume.hpp"

namespace dynreg {

enum class ModelKind { ic_tvtv, ic_l2tv, rigid_tvtv, rigid_l2tv };

constexpr bool is_ic(ModelKind k) noexcept { return k == ModelKind::ic_tvtv || k == ModelKind::ic_l2tv; }

/// True when the first regulariser term is (alpha1/2)||.||^2 rather than a TV term.
constexpr bool first_term_quadratic(ModelKind k) noexcept {
  return k == ModelKind::ic_l2tv || k == ModelKind::rigid_l2tv;
}

constexpr std::string_view cli_name(ModelKind k) noexcept {
  switch (k) {
    case ModelKind::ic_tvtv: return "ictvtv";
    case ModelKind::ic_l2tv: return "icl2tv";
    case ModelKind::rigid_tvtv: return "rigidtvtv";
    case ModelKind::rigid_l2tv: return "rigidl2tv";
  }
  return "?";
}

constexpr std::string_view display_name(ModelKind k) noexcept {
  switch (k) {
    case ModelKind::ic_tvtv: return "TVTV";
    case ModelKind::ic_l2tv: return "L2TV";
    case ModelKind::rigid_tvtv: return "Rigid TVTV";
    case ModelKind::rigid_l2tv: return "Rigid L2TV";
  }
  return "?";
}

inline ModelKind parse_model(std::string_view s) {
  for (ModelKind k : {ModelKind::ic_tvtv, ModelKind::ic_l2tv, ModelKind::rigid_tvtv, ModelKind::rigid_l2tv})
    if (cli_name(k) == s) return k;
  throw std::invalid_argument("unknown model '" + std::string(s) + "'");
}

/// Regulariser choice plus the smoothing constants used by the differentiable system.
struct ModelSpec {
  ModelKind kind = ModelKind::ic_tvtv;
  double gamma = 0.01;    // Huber threshold
  double epsilon = 1e-8;  // elliptic weight
};

/// (alpha1, alpha2, kappa); kappa is present exactly for IC models.
struct ParamVector {
  double alpha1 = 0.0;
  double alpha2 = 0.0;
  std::optional<double> kappa;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

inline void validate(ModelKind kind, const ParamVector& p) {
  if (!std::isfinite(p.alpha1) || !std::isfinite(p.alpha2) || p.alpha1 < 0.0 || p.alpha2 < 0.0)
    throw std::invalid_argument("alpha1, alpha2 must be finite and nonnegative");
  if (is_ic(kind)) {
    if (!p.kappa) throw std::invalid_argument("IC models require kappa");
    if (!std::isfinite(*p.kappa)) throw std::invalid_argument("kappa must be finite");
  } else if (p.kappa) {
    throw std::invalid_argument("rigid models take no kappa");
  }
}

/// Gradient weights of the two regulariser terms. For IC models the first term acts on
/// u - w and the second on w; for rigid models both act on u.
struct TermGeometry {
  AxisWeights first;
  AxisWeights second;
};

inline TermGeometry term_geometry(ModelKind kind, const ParamVector& p) {
  if (is_ic(kind)) return {kappa_weights(*p.kappa), kappa_weights(1.0 - *p.kappa)};
  return {kappa_weights(1.0), kappa_weights(0.0)};
}

inline double huber(double r, double gamma) noexcept {
  const double a = std::abs(r);
  return a >= gamma ? a - 0.5 * gamma : a * a / (2.0 * gamma);
}

/// Sum of H_gamma(|v(x)|) + (eps/2)||v||^2.
inline double theta(const VectorField3& v, double gamma, double eps) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double n = v.norm_at(i);
    s += huber(n, gamma) + 0.5 * eps * n * n;
  }
  return s;
}

inline void psi1_into(const VectorField3& v, double gamma, double eps, VectorField3& out) noexcept {
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double s = 1.0 / std::max(gamma, v.norm_at(i)) + eps;
    out.dx[i] = s * v.dx[i];
    out.dy[i] = s * v.dy[i];
    out.dt[i] = s * v.dt[i];
  }
}

/// Gradient of theta.
inline VectorField3 psi1(const VectorField3& v, double gamma, double eps) {
  VectorField3 out(v.dims);
  psi1_into(v, gamma, eps, out);
  return out;
}

// At |v| == gamma the outer branch is used.
inline void psi2_into(const VectorField3& v, double gamma, double eps, MatrixField3& out) noexcept {
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double n = v.norm_at(i);
    if (n < gamma) {
      const double d = 1.0 / gamma + eps;
      out.xx[i] = d, out.yy[i] = d, out.tt[i] = d;
      out.xy[i] = 0.0, out.xt[i] = 0.0, out.yt[i] = 0.0;
    } else {
      const double inv = 1.0 / n;
      const double inv3 = inv * inv * inv;
      const double a = v.dx[i], b = v.dy[i], c = v.dt[i];
      out.xx[i] = inv - a * a * inv3 + eps;
      out.yy[i] = inv - b * b * inv3 + eps;
      out.tt[i] = inv - c * c * inv3 + eps;
      out.xy[i] = -a * b * inv3;
      out.xt[i] = -a * c * inv3;
      out.yt[i] = -b * c * inv3;
    }
  }
}

/// Hessian of theta, one symmetric 3x3 block per voxel.
inline MatrixField3 psi2(const VectorField3& v, double gamma, double eps) {
  MatrixField3 out(v.dims);
  psi2_into(v, gamma, eps, out);
  return out;
}

namespace detail {

inline double half_squared(const VectorField3& v) noexcept { return 0.5 * dot(v, v); }

// Arguments of the two regulariser terms at (u, w).
inline std::pair<VectorField3, VectorField3> term_arguments(ModelKind kind, const VideoVolume& u,
                                                            const VideoVolume& w, const ParamVector& p) {
  const TermGeometry geo = term_geometry(kind, p);
  VectorField3 z1(u.dims()), z2(u.dims());
  if (is_ic(kind)) {
    const VideoVolume v = u - w;
    gradient_into(u.dims(), v.span(), geo.first, z1);
    gradient_into(u.dims(), w.span(), geo.second, z2);
  } else {
    gradient_into(u.dims(), u.span(), geo.first, z1);
    gradient_into(u.dims(), u.span(), geo.second, z2);
  }
  return {std::move(z1), std::move(z2)};
}

inline double data_term(const VideoVolume& u, const VideoVolume& f) {
  require_same_dims(u.dims(), f.dims(), "data term");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double r = u[i] - f[i];
    s += r * r;
  }
  return 0.5 * s;
}

}  // namespace detail

/// Smoothed objective J_{gamma,eps}(u, w). `w` is ignored for rigid models. The IC
/// energies carry the pinning term (1/2)(sum w)^2.
inline double energy_smoothed(const ModelSpec& model, const VideoVolume& u, const VideoVolume& w,
                              const ParamVector& p, const VideoVolume& f) {
  validate(model.kind, p);
  if (is_ic(model.kind)) require_same_dims(u.dims(), w.dims(), "energy_smoothed");
  auto [z1, z2] = detail::term_arguments(model.kind, u, w, p);
  double e = detail::data_term(u, f);
  e += first_term_quadratic(model.kind) ? p.alpha1 * detail::half_squared(z1)
                                        : p.alpha1 * theta(z1, model.gamma, model.epsilon);
  e += p.alpha2 * theta(z2, model.gamma, model.epsilon);
  if (is_ic(model.kind)) {
    const double m = sum(w.span());
    e += 0.5 * m * m;
  }
  return e;
}

/// Nonsmooth objective: exact 2,1-norms, no elliptic term, no pinning.
inline double energy_unsmoothed(const ModelSpec& model, const VideoVolume& u, const VideoVolume& w,
                                const ParamVector& p, const VideoVolume& f) {
  validate(model.kind, p);
  if (is_ic(model.kind)) require_same_dims(u.dims(), w.dims(), "energy_unsmoothed");
  auto [z1, z2] = detail::term_arguments(model.kind, u, w, p);
  double e = detail::data_term(u, f);
  e += first_term_quadratic(model.kind) ? p.alpha1 * detail::half_squared(z1) : p.alpha1 * norm_21(z1);
  e += p.alpha2 * norm_21(z2);
  return e;
}

/// Reparameterisation kappa -> kappa / (2 kappa - 1) that leaves the unsmoothed energy
/// unchanged: TV weights scale by |2 kappa - 1|, the quadratic weight by (2 kappa - 1)^2.
inline ParamVector convert_kappa(ModelKind kind, const ParamVector& p) {
  if (!is_ic(kind)) throw std::invalid_argument("convert_kappa: rigid models have no kappa");
  const double s = 2.0 * *p.kappa - 1.0;
  if (s == 0.0) throw std::invalid_argument("convert_kappa: undefined at kappa = 1/2");
  ParamVector out;
  out.alpha1 = first_term_quadratic(kind) ? p.alpha1 * s * s : p.alpha1 * std::abs(s);
  out.alpha2 = p.alpha2 * std::abs(s);
  out.kappa = *p.kappa / s;
  return out;
}

struct NormalizedParams {
  ParamVector params;
  bool converted = false;  // the star flag in reports
};

/// Maps kappa outside [0, 1] into (0, 1) via convert_kappa.
inline NormalizedParams normalize_kappa(ModelKind kind, const ParamVector& p) {
  if (!is_ic(kind) || (*p.kappa >= 0.0 && *p.kappa <= 1.0)) return {p, false};
  return {convert_kappa(kind, p), true};
}

}  // namespace dynreg
