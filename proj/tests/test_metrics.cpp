#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dynreg;
using namespace dynreg::testing;

TEST(Psnr, IdenticalIsInfinite) {
  const VideoVolume g(Dims{4, 4, 2}, std::vector<double>(32, 0.3));
  EXPECT_TRUE(std::isinf(psnr(g, g)));
}

TEST(Psnr, ConstantOffset) {
  std::mt19937_64 rng(41);
  const VideoVolume g = random_volume({7, 5, 3}, rng);
  VideoVolume u = g;
  for (std::size_t i = 0; i < u.size(); ++i) u[i] += 0.1;
  EXPECT_NEAR(psnr(u, g), 20.0, 1e-10);
}

TEST(Psnr, MatchesScalarLoop) {
  std::mt19937_64 rng(42);
  const VideoVolume g = random_volume({9, 8, 4}, rng), u = random_volume({9, 8, 4}, rng);
  long double se = 0;
  for (std::size_t i = 0; i < g.size(); ++i) se += (long double)(u[i] - g[i]) * (u[i] - g[i]);
  const double oracle = -10.0 * std::log10(static_cast<double>(se / g.size()));
  EXPECT_NEAR(psnr(u, g), oracle, 1e-10);
}

TEST(Ssim, IdenticalIsOne) {
  std::mt19937_64 rng(43);
  for (Dims d : {Dims{16, 16, 3}, Dims{5, 5, 2}}) {
    const VideoVolume g = random_volume(d, rng);
    EXPECT_NEAR(ssim(g, g), 1.0, 1e-12);
  }
}

TEST(Ssim, ConstantFrames) {
  for (Dims d : {Dims{16, 16, 2}, Dims{4, 4, 2}}) {
    const VideoVolume g(d, std::vector<double>(d.size(), 0.5)), u(d, std::vector<double>(d.size(), 0.6));
    const double c1 = 1e-4;
    EXPECT_NEAR(ssim(u, g), (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1), 1e-12);
    EXPECT_NEAR(ssim(u, g), 0.98361, 1e-5);
  }
}

TEST(Ssim, Symmetric) {
  std::mt19937_64 rng(44);
  const VideoVolume g = random_volume({20, 14, 3}, rng), u = random_volume({20, 14, 3}, rng);
  EXPECT_EQ(ssim(u, g), ssim(g, u));
  EXPECT_LT(ssim(u, g), 0.5);
}

TEST(Ssim, MatchesDirectWindowSum) {
  // Direct 2D 11x11 Gaussian weighting of one valid window position.
  std::mt19937_64 rng(45);
  const Dims d{11, 11, 1};
  const VideoVolume a = random_volume(d, rng), b = random_volume(d, rng);
  double ws = 0, ma = 0, mb = 0, eaa = 0, ebb = 0, eab = 0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) {
      const double wgt = std::exp(-((x - 5) * (x - 5) + (y - 5) * (y - 5)) / (2 * 1.5 * 1.5));
      const double va = a(x, y, 0), vb = b(x, y, 0);
      ws += wgt, ma += wgt * va, mb += wgt * vb, eaa += wgt * va * va, ebb += wgt * vb * vb, eab += wgt * va * vb;
    }
  ma /= ws, mb /= ws, eaa /= ws, ebb /= ws, eab /= ws;
  const double c1 = 1e-4, c2 = 9e-4;
  const double oracle = ((2 * ma * mb + c1) * (2 * (eab - ma * mb) + c2)) /
                        ((ma * ma + mb * mb + c1) * (eaa - ma * ma + ebb - mb * mb + c2));
  EXPECT_NEAR(ssim(a, b), oracle, 1e-12);
}

TEST(OuterObjective, Values) {
  const Dims d{10, 10, 10};
  const VideoVolume g(d);
  EXPECT_EQ(outer_objective(g, g), 0.0);
  const VideoVolume u(d, std::vector<double>(d.size(), 0.1));
  EXPECT_NEAR(outer_objective(u, g), 5.0, 1e-12);

  std::mt19937_64 rng(46);
  const VideoVolume x = random_volume({6, 5, 4}, rng), y = random_volume({6, 5, 4}, rng);
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += 0.5 * (x[i] - y[i]) * (x[i] - y[i]);
  EXPECT_NEAR(outer_objective(x, y), s, 1e-12 * s);
}

TEST(Metrics, ReportIsConsistent) {
  std::mt19937_64 rng(47);
  const VideoVolume g = random_volume({12, 12, 3}, rng), u = random_volume({12, 12, 3}, rng);
  const MetricReport r = evaluate_metrics(u, g);
  EXPECT_EQ(r.psnr, psnr(u, g));
  EXPECT_EQ(r.ssim, ssim(u, g));
  ASSERT_EQ(r.frame_ssim.size(), 3U);
  EXPECT_NEAR((r.frame_ssim[0] + r.frame_ssim[1] + r.frame_ssim[2]) / 3, r.ssim, 1e-15);
  EXPECT_THROW(psnr(u, VideoVolume(Dims{12, 12, 2})), std::invalid_argument);
}
