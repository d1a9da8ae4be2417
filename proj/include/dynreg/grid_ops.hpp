#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dynreg/random.hpp"
#include "dynreg/volume.hpp"

namespace dynreg {

/// Per-axis weights of a scaled forward-difference gradient.
struct AxisWeights {
  double x = 1.0;
  double y = 1.0;
  double t = 1.0;
};

/// Weights of the anisotropic gradient: kappa on space, (1 - kappa) on time.
constexpr AxisWeights kappa_weights(double kappa) noexcept { return {kappa, kappa, 1.0 - kappa}; }

/// d/dkappa of kappa_weights; independent of kappa.
constexpr AxisWeights dkappa_weights() noexcept { return {1.0, 1.0, -1.0}; }

// Forward differences with a zero difference on the last slice of every axis.
// `out` must already have the dimensions of the input.
inline void gradient_into(const Dims& d, std::span<const double> u, AxisWeights wt, VectorField3& out) {
  const std::size_t sy = d.w;
  const std::size_t st = d.w * d.h;
  for (std::size_t t = 0; t < d.t; ++t) {
    for (std::size_t y = 0; y < d.h; ++y) {
      const std::size_t row = d.index(0, y, t);
      for (std::size_t x = 0; x < d.w; ++x) {
        const std::size_t i = row + x;
        const double c = u[i];
        out.dx[i] = x + 1 < d.w ? wt.x * (u[i + 1] - c) : 0.0;
        out.dy[i] = y + 1 < d.h ? wt.y * (u[i + sy] - c) : 0.0;
        out.dt[i] = t + 1 < d.t ? wt.t * (u[i + st] - c) : 0.0;
      }
    }
  }
}

// out += scale * div_w(p), where div_w is the exact negative adjoint of gradient_into(., w).
inline void divergence_add(const VectorField3& p, AxisWeights wt, double scale, std::span<double> out) {
  const Dims& d = p.dims;
  const std::size_t sy = d.w;
  const std::size_t st = d.w * d.h;
  const double ax = scale * wt.x, ay = scale * wt.y, at = scale * wt.t;
  for (std::size_t t = 0; t < d.t; ++t) {
    for (std::size_t y = 0; y < d.h; ++y) {
      const std::size_t row = d.index(0, y, t);
      for (std::size_t x = 0; x < d.w; ++x) {
        const std::size_t i = row + x;
        double gx = x + 1 < d.w ? p.dx[i] : 0.0;
        if (x > 0) gx -= p.dx[i - 1];
        double gy = y + 1 < d.h ? p.dy[i] : 0.0;
        if (y > 0) gy -= p.dy[i - sy];
        double gt = t + 1 < d.t ? p.dt[i] : 0.0;
        if (t > 0) gt -= p.dt[i - st];
        out[i] += ax * gx + ay * gy + at * gt;
      }
    }
  }
}

/// (kappa Dx u, kappa Dy u, (1 - kappa) Dt u).
inline VectorField3 grad_kappa(const VideoVolume& u, double kappa) {
  VectorField3 out(u.dims());
  gradient_into(u.dims(), u.span(), kappa_weights(kappa), out);
  return out;
}

/// Negative adjoint of grad_kappa.
inline VideoVolume div_kappa(const VectorField3& p, double kappa) {
  VideoVolume out(p.dims);
  divergence_add(p, kappa_weights(kappa), 1.0, out.span());
  return out;
}

/// (Dx u, Dy u, -Dt u): the kappa-derivative of grad_kappa.
inline VectorField3 dkappa_grad(const VideoVolume& u) {
  VectorField3 out(u.dims());
  gradient_into(u.dims(), u.span(), dkappa_weights(), out);
  return out;
}

/// Adjoint of dkappa_grad.
inline VideoVolume dkappa_grad_adjoint(const VectorField3& p) {
  VideoVolume out(p.dims);
  divergence_add(p, dkappa_weights(), -1.0, out.span());
  return out;
}

/// Sum over voxels of the pointwise Euclidean norm (mesh size 1).
inline double norm_21(const VectorField3& p) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p.norm_at(i);
  return s;
}

/// Matrix-free linear operator from R^cols to R^rows with its adjoint.
struct LinearOperator {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::function<void(std::span<const double>, std::span<double>)> apply;
  std::function<void(std::span<const double>, std::span<double>)> apply_adjoint;
};

/// Power iteration on A^T A. Returns the final Rayleigh quotient ||A x||^2 / ||x||^2,
/// a lower bound on ||A||^2 that is nondecreasing in the iteration count.
inline double operator_norm_estimate(const LinearOperator& op, int iterations, std::uint64_t seed) {
  if (op.cols == 0 || op.rows == 0) throw std::invalid_argument("operator_norm_estimate: empty operator");
  std::vector<double> x(op.cols), ax(op.rows), atax(op.cols);
  for (std::size_t i = 0; i < op.cols; ++i) x[i] = uniform_open01(seed, 0x6e6f726d, i) - 0.5;

  double estimate = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const double nx = norm2(x);
    if (!(nx > 0.0) || !std::isfinite(nx)) throw std::runtime_error("operator_norm_estimate: iterate collapsed to zero");
    for (double& v : x) v /= nx;
    op.apply(x, ax);
    estimate = dot(ax, ax);
    std::fill(atax.begin(), atax.end(), 0.0);
    op.apply_adjoint(ax, atax);
    x.swap(atax);
  }
  return estimate;
}

}  // namespace dynreg
