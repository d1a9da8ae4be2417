#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dynreg/volume.hpp"

namespace dynreg {

struct KrylovResult {
  bool converged = false;
  std::size_t iterations = 0;
  double relative_residual = 0.0;  // ||b - A x|| / ||b||, recomputed from scratch on exit
};

/// Preconditioned conjugate gradients for a symmetric positive definite operator.
/// `apply(x, y)` writes y = A x; `precondition(r, z)` writes z = M^{-1} r.
/// `x` holds the initial guess on entry and the solution on exit. When the recursive
/// residual meets the tolerance but the true one does not, the iteration restarts from x.
template <class Apply, class Precondition>
KrylovResult pcg(Apply&& apply, Precondition&& precondition, std::span<const double> b, std::span<double> x,
                 double tolerance, std::size_t max_iterations) {
  const std::size_t n = b.size();
  KrylovResult res;
  const double bnorm = norm2(b);
  if (bnorm == 0.0) {
    std::fill(x.begin(), x.end(), 0.0);
    res.converged = true;
    return res;
  }

  std::vector<double> r(n), z(n), p(n), ap(n);
  const auto true_residual = [&] {
    apply(std::span<const double>(x.data(), n), std::span<double>(ap));
    for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ap[i];
    return norm2(r) / bnorm;
  };

  std::size_t k = 0;
  double rel = true_residual();
  for (int restart = 0; restart < 4 && rel > tolerance && k < max_iterations; ++restart) {
    precondition(std::span<const double>(r), std::span<double>(z));
    p = z;
    double rz = dot(r, z);
    double rec = rel;
    while (rec > tolerance && k < max_iterations) {
      apply(std::span<const double>(p), std::span<double>(ap));
      const double pap = dot(p, ap);
      if (!(pap > 0.0)) break;  // not positive definite along p
      const double a = rz / pap;
      axpy(a, p, x);
      axpy(-a, ap, r);
      ++k;
      rec = norm2(r) / bnorm;
      if (rec <= tolerance) break;
      precondition(std::span<const double>(r), std::span<double>(z));
      const double rz_next = dot(r, z);
      const double beta = rz_next / rz;
      rz = rz_next;
      for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    }
    const double before = rel;
    rel = true_residual();
    if (!(rel < before)) break;  // no progress
  }

  res.iterations = k;
  res.relative_residual = rel;
  res.converged = std::isfinite(rel) && rel <= tolerance;
  return res;
}

}  // namespace dynreg
