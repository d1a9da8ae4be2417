#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dynreg;
using namespace dynreg::testing;

TEST(Huber, Branches) {
  EXPECT_DOUBLE_EQ(huber(1.0, 0.01), 0.995);
  EXPECT_DOUBLE_EQ(huber(0.005, 0.01), 0.00125);
  EXPECT_DOUBLE_EQ(huber(0.01, 0.01), 0.005);
  EXPECT_NEAR(huber(std::nextafter(0.01, 0.0), 0.01), 0.005, 1e-15);
  EXPECT_DOUBLE_EQ(huber(-1.0, 0.01), 0.995);
}

TEST(Theta, SingleVoxel) {
  VectorField3 v(Dims{1, 1, 1});
  EXPECT_EQ(theta(v, 0.01, 0.0), 0.0);
  v.dx[0] = 3.0, v.dy[0] = 4.0;
  EXPECT_DOUBLE_EQ(theta(v, 0.01, 0.0), 4.995);
}

TEST(Theta, MatchesScalarLoop) {
  std::mt19937_64 rng(1);
  const Dims d{6, 5, 4};
  VectorField3 v = random_field(d, rng, 0.02);
  const double gamma = 0.01, eps = 1e-3;
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double n = std::sqrt(v.dx[i] * v.dx[i] + v.dy[i] * v.dy[i] + v.dt[i] * v.dt[i]);
    s += (n >= gamma ? n - gamma / 2 : n * n / (2 * gamma)) + eps * n * n / 2;
  }
  EXPECT_NEAR(theta(v, gamma, eps), s, 1e-12 * s);
}

TEST(Psi1, InnerBranch) {
  VectorField3 v(Dims{1, 1, 1});
  const VectorField3 z = psi1(v, 0.01, 0.0);
  EXPECT_EQ(z.dx[0], 0.0);
  v.dx[0] = 0.003, v.dy[0] = 0.004;
  const VectorField3 p = psi1(v, 0.01, 0.0);
  EXPECT_NEAR(p.dx[0], 0.3, 1e-15);
  EXPECT_NEAR(p.dy[0], 0.4, 1e-15);
  EXPECT_EQ(p.dt[0], 0.0);
}

TEST(Psi1, DirectionalDerivativeOfTheta) {
  std::mt19937_64 rng(2);
  const Dims d{5, 4, 3};
  const VectorField3 v = random_field(d, rng, 0.02), dir = random_field(d, rng);
  const double gamma = 0.01, eps = 1e-8, h = 1e-7;
  VectorField3 vp = v, vm = v;
  for (std::size_t i = 0; i < v.size(); ++i) {
    vp.dx[i] += h * dir.dx[i], vp.dy[i] += h * dir.dy[i], vp.dt[i] += h * dir.dt[i];
    vm.dx[i] -= h * dir.dx[i], vm.dy[i] -= h * dir.dy[i], vm.dt[i] -= h * dir.dt[i];
  }
  const double fd = (theta(vp, gamma, eps) - theta(vm, gamma, eps)) / (2 * h);
  EXPECT_LE(rel_diff(fd, dot(psi1(v, gamma, eps), dir)), 1e-6);
}

TEST(Psi2, ClosedForms) {
  VectorField3 v(Dims{1, 1, 1});
  MatrixField3 m = psi2(v, 0.01, 0.0);
  EXPECT_DOUBLE_EQ(m.xx[0], 100.0);
  EXPECT_DOUBLE_EQ(m.tt[0], 100.0);
  EXPECT_EQ(m.xy[0], 0.0);
  v.dx[0] = 1.0;
  m = psi2(v, 0.01, 0.0);
  EXPECT_DOUBLE_EQ(m.xx[0], 0.0);
  EXPECT_DOUBLE_EQ(m.yy[0], 1.0);
  EXPECT_DOUBLE_EQ(m.tt[0], 1.0);
  EXPECT_EQ(m.xt[0], 0.0);
}

TEST(Psi2, JacobianOfPsi1) {
  std::mt19937_64 rng(3);
  const Dims d{4, 4, 3};
  VectorField3 v = random_field(d, rng, 0.05);
  // Keep every voxel away from the kink |v| = gamma.
  const double gamma = 0.01, eps = 1e-8, h = 1e-7;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double n = v.norm_at(i);
    if (std::abs(n - gamma) < 1e-3) v.dx[i] += 0.01;
  }
  const VectorField3 dir = random_field(d, rng);
  VectorField3 vp = v, vm = v;
  for (std::size_t i = 0; i < v.size(); ++i) {
    vp.dx[i] += h * dir.dx[i], vp.dy[i] += h * dir.dy[i], vp.dt[i] += h * dir.dt[i];
    vm.dx[i] -= h * dir.dx[i], vm.dy[i] -= h * dir.dy[i], vm.dt[i] -= h * dir.dt[i];
  }
  const VectorField3 pp = psi1(vp, gamma, eps), pm = psi1(vm, gamma, eps);
  const MatrixField3 m = psi2(v, gamma, eps);
  std::vector<double> fd, an;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double a, b, c;
    m.apply_at(i, dir.dx[i], dir.dy[i], dir.dt[i], a, b, c);
    an.insert(an.end(), {a, b, c});
    fd.insert(fd.end(), {(pp.dx[i] - pm.dx[i]) / (2 * h), (pp.dy[i] - pm.dy[i]) / (2 * h), (pp.dt[i] - pm.dt[i]) / (2 * h)});
  }
  EXPECT_LE(rel_diff(fd, an), 1e-5);
}

namespace {

// Term-by-term evaluation with explicit loops over the grid.
double naive_energy(ModelKind kind, const VideoVolume& u, const VideoVolume& w, const ParamVector& p,
                    const VideoVolume& f, double gamma, double eps) {
  const Dims d = u.dims();
  const auto at = [&](const VideoVolume& v, std::size_t x, std::size_t y, std::size_t t) { return v[d.index(x, y, t)]; };
  const auto diffs = [&](const VideoVolume& v, std::size_t x, std::size_t y, std::size_t t, double ks) {
    const double ddx = x + 1 < d.w ? at(v, x + 1, y, t) - at(v, x, y, t) : 0.0;
    const double ddy = y + 1 < d.h ? at(v, x, y + 1, t) - at(v, x, y, t) : 0.0;
    const double ddt = t + 1 < d.t ? at(v, x, y, t + 1) - at(v, x, y, t) : 0.0;
    return std::array<double, 3>{ks * ddx, ks * ddy, (1 - ks) * ddt};
  };
  const bool ic = is_ic(kind);
  VideoVolume a1 = u, a2 = u;
  if (ic) {
    for (std::size_t i = 0; i < u.size(); ++i) a1[i] = u[i] - w[i];
    a2 = w;
  }
  const double k1 = ic ? *p.kappa : 1.0, k2 = ic ? 1.0 - *p.kappa : 0.0;
  const bool quad = kind == ModelKind::ic_l2tv || kind == ModelKind::rigid_l2tv;
  double e = 0.0, wsum = 0.0;
  for (std::size_t t = 0; t < d.t; ++t)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const double r = at(u, x, y, t) - at(f, x, y, t);
        e += 0.5 * r * r;
        const auto z1 = diffs(a1, x, y, t, k1);
        const auto z2 = diffs(a2, x, y, t, k2);
        const double n1 = std::hypot(z1[0], z1[1], z1[2]), n2 = std::hypot(z2[0], z2[1], z2[2]);
        e += quad ? p.alpha1 * 0.5 * n1 * n1 : p.alpha1 * (huber(n1, gamma) + 0.5 * eps * n1 * n1);
        e += p.alpha2 * (huber(n2, gamma) + 0.5 * eps * n2 * n2);
        if (ic) wsum += at(w, x, y, t);
      }
  return e + (ic ? 0.5 * wsum * wsum : 0.0);
}

}  // namespace

TEST(EnergySmoothed, Trivial) {
  std::mt19937_64 rng(4);
  const Dims d{4, 3, 2};
  const VideoVolume g = random_volume(d, rng);
  const ModelSpec m{ModelKind::ic_tvtv};
  EXPECT_EQ(energy_smoothed(m, g, VideoVolume(d), {0.0, 0.0, 0.4}, g), 0.0);
  const VideoVolume c(d, std::vector<double>(d.size(), 0.7));
  EXPECT_EQ(energy_smoothed(m, c, VideoVolume(d), {0.3, 0.2, 0.4}, c), 0.0);

  VideoVolume u = g, w(d);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] += 0.1;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.05;
  const double m0 = 0.05 * static_cast<double>(d.size());
  EXPECT_NEAR(energy_smoothed(m, u, w, {0.0, 0.0, 0.4}, g), 0.5 * d.size() * 0.01 + 0.5 * m0 * m0, 1e-12);
}

TEST(EnergySmoothed, MatchesTermByTermOracle) {
  std::mt19937_64 rng(5);
  const Dims d{5, 4, 3};
  const VideoVolume f = random_volume(d, rng), u = random_volume(d, rng), w = random_volume(d, rng, -0.2, 0.2);
  for (ModelKind k : {ModelKind::ic_tvtv, ModelKind::ic_l2tv, ModelKind::rigid_tvtv, ModelKind::rigid_l2tv}) {
    const ParamVector p = is_ic(k) ? ParamVector{0.7, 0.3, 0.35} : ParamVector{0.7, 0.3, std::nullopt};
    const ModelSpec m{k, 0.01, 1e-3};
    const double oracle = naive_energy(k, u, w, p, f, 0.01, 1e-3);
    EXPECT_LE(rel_diff(energy_smoothed(m, u, w, p, f), oracle), 1e-12) << cli_name(k);
  }
}

TEST(EnergyUnsmoothed, TemporalJumps) {
  const Dims d{1, 1, 3};
  VideoVolume u(d, {0.0, 1.0, 2.0});
  EXPECT_DOUBLE_EQ(energy_unsmoothed({ModelKind::rigid_tvtv}, u, VideoVolume(d), {0.0, 1.0, std::nullopt}, u), 2.0);
  // w = 0: the first IC term sees the jumps with temporal weight 1 - kappa.
  EXPECT_DOUBLE_EQ(energy_unsmoothed({ModelKind::ic_tvtv}, u, VideoVolume(d), {1.0, 1.0, 0.3}, u), 1.4);
}

TEST(EnergyUnsmoothed, LimitOfSmoothed) {
  std::mt19937_64 rng(6);
  const Dims d{5, 5, 3};
  const VideoVolume f = random_volume(d, rng), u = random_volume(d, rng), w = random_volume(d, rng, -0.1, 0.1);
  const ParamVector p{0.4, 0.6, 0.3};
  const double ref = energy_unsmoothed({ModelKind::ic_tvtv}, u, w, p, f);
  const double m = sum(w.span());
  for (double gamma : {1e-2, 1e-4, 1e-6}) {
    const double e = energy_smoothed({ModelKind::ic_tvtv, gamma, 0.0}, u, w, p, f) - 0.5 * m * m;
    EXPECT_LE(std::abs(e - ref), (p.alpha1 + p.alpha2) * gamma * static_cast<double>(d.size()));
  }
}

TEST(Kappa, ConversionLeavesEnergyUnchanged) {
  std::mt19937_64 rng(7);
  const Dims d{6, 5, 4};
  const VideoVolume f = random_volume(d, rng), u = random_volume(d, rng), w = random_volume(d, rng);
  for (ModelKind k : {ModelKind::ic_tvtv, ModelKind::ic_l2tv})
    for (double kappa : {2.0, -1.0, 1.5}) {
      const ParamVector p{0.3, 0.2, kappa};
      const ParamVector q = convert_kappa(k, p);
      const double lhs = energy_unsmoothed({k}, u, w, p, f);
      const double rhs = energy_unsmoothed({k}, u, w, q, f);
      EXPECT_LE(rel_diff(lhs, rhs), 1e-12) << cli_name(k) << " " << kappa;
    }
}

TEST(Kappa, ConversionIsAnInvolution) {
  for (double kappa : {2.0, -1.0, 1.5, -0.05, 3.7}) {
    const ParamVector p{0.3, 0.2, kappa};
    const ParamVector back = convert_kappa(ModelKind::ic_l2tv, convert_kappa(ModelKind::ic_l2tv, p));
    EXPECT_NEAR(back.alpha1, p.alpha1, 1e-14);
    EXPECT_NEAR(back.alpha2, p.alpha2, 1e-14);
    EXPECT_NEAR(*back.kappa, kappa, 1e-13);
  }
  EXPECT_THROW(convert_kappa(ModelKind::ic_tvtv, {1, 1, 0.5}), std::invalid_argument);
}

TEST(Kappa, NormalizationLandsInUnitInterval) {
  for (double kappa : {-50.0, -1.0, -0.05, 0.0, 0.3, 1.0, 1.5, 2.0, 50.0}) {
    const NormalizedParams n = normalize_kappa(ModelKind::ic_tvtv, {0.1, 0.1, kappa});
    EXPECT_GE(*n.params.kappa, 0.0);
    EXPECT_LE(*n.params.kappa, 1.0);
    EXPECT_EQ(n.converted, kappa < 0.0 || kappa > 1.0) << kappa;
  }
}

TEST(Params, Validation) {
  EXPECT_THROW(validate(ModelKind::ic_tvtv, {0.1, 0.1, std::nullopt}), std::invalid_argument);
  EXPECT_THROW(validate(ModelKind::rigid_tvtv, {0.1, 0.1, 0.5}), std::invalid_argument);
  EXPECT_THROW(validate(ModelKind::rigid_l2tv, {-0.1, 0.1, std::nullopt}), std::invalid_argument);
  EXPECT_NO_THROW(validate(ModelKind::ic_l2tv, {0.0, 0.0, -3.0}));
  EXPECT_EQ(parse_model("icl2tv"), ModelKind::ic_l2tv);
  EXPECT_THROW(parse_model("tgv"), std::invalid_argument);
}
