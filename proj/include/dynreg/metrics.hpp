#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "dynreg/volume.hpp"

namespace dynreg {

/// PSNR in dB for intensities normalised to [0, 1] (peak 1). +inf when the inputs coincide.
inline double psnr(const VideoVolume& u, const VideoVolume& g) {
  require_same_dims(u.dims(), g.dims(), "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double r = u[i] - g[i];
    se += r * r;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(u.size());
  return 10.0 * std::log10(1.0 / mse);
}

/// (1/2)||u - g||^2 with unit mesh size.
inline double outer_objective(const VideoVolume& u, const VideoVolume& g) {
  require_same_dims(u.dims(), g.dims(), "outer_objective");
  double se = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double r = u[i] - g[i];
    se += r * r;
  }
  return 0.5 * se;
}

namespace detail {

inline constexpr int ssim_window = 11;
inline constexpr double ssim_sigma = 1.5;

inline std::array<double, ssim_window> gaussian_taps() {
  std::array<double, ssim_window> k{};
  double s = 0.0;
  for (int i = 0; i < ssim_window; ++i) {
    const double x = i - ssim_window / 2;
    k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * ssim_sigma * ssim_sigma));
    s += k[static_cast<std::size_t>(i)];
  }
  for (double& v : k) v /= s;
  return k;
}

// 'valid' separable Gaussian filter of a w x h image.
inline std::vector<double> filter_valid(const double* img, std::size_t w, std::size_t h,
                                        const std::array<double, ssim_window>& k) {
  const std::size_t ow = w - ssim_window + 1, oh = h - ssim_window + 1;
  std::vector<double> tmp(ow * h), out(ow * oh);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int j = 0; j < ssim_window; ++j) s += k[static_cast<std::size_t>(j)] * img[y * w + x + static_cast<std::size_t>(j)];
      tmp[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int j = 0; j < ssim_window; ++j) s += k[static_cast<std::size_t>(j)] * tmp[(y + static_cast<std::size_t>(j)) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

inline double ssim_index(double mx, double my, double exx, double eyy, double exy) noexcept {
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const double vx = exx - mx * mx;
  const double vy = eyy - my * my;
  const double cxy = exy - mx * my;
  return ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

}  // namespace detail

/// SSIM of one frame: mean of the 11x11 Gaussian (sigma 1.5) SSIM map over the valid
/// region, dynamic range 1. Frames smaller than the window use whole-frame statistics.
inline double ssim_frame(const VideoVolume& u, const VideoVolume& g, std::size_t t) {
  const Dims& d = u.dims();
  const std::size_t n = d.w * d.h;
  const double* a = u.values().data() + t * n;
  const double* b = g.values().data() + t * n;
  if (d.w < detail::ssim_window || d.h < detail::ssim_window) {
    double ma = 0, mb = 0, eaa = 0, ebb = 0, eab = 0;
    for (std::size_t i = 0; i < n; ++i) {
      ma += a[i], mb += b[i];
      eaa += a[i] * a[i], ebb += b[i] * b[i], eab += a[i] * b[i];
    }
    const double inv = 1.0 / static_cast<double>(n);
    return detail::ssim_index(ma * inv, mb * inv, eaa * inv, ebb * inv, eab * inv);
  }
  const auto k = detail::gaussian_taps();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) aa[i] = a[i] * a[i], bb[i] = b[i] * b[i], ab[i] = a[i] * b[i];
  const auto ma = detail::filter_valid(a, d.w, d.h, k);
  const auto mb = detail::filter_valid(b, d.w, d.h, k);
  const auto eaa = detail::filter_valid(aa.data(), d.w, d.h, k);
  const auto ebb = detail::filter_valid(bb.data(), d.w, d.h, k);
  const auto eab = detail::filter_valid(ab.data(), d.w, d.h, k);
  double s = 0.0;
  for (std::size_t i = 0; i < ma.size(); ++i) s += detail::ssim_index(ma[i], mb[i], eaa[i], ebb[i], eab[i]);
  return s / static_cast<double>(ma.size());
}

/// Mean of the per-frame SSIM values.
inline double ssim(const VideoVolume& u, const VideoVolume& g) {
  require_same_dims(u.dims(), g.dims(), "ssim");
  double s = 0.0;
  for (std::size_t t = 0; t < u.dims().t; ++t) s += ssim_frame(u, g, t);
  return s / static_cast<double>(u.dims().t);
}

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double opt_value = 0.0;
  std::vector<double> frame_psnr;
  std::vector<double> frame_ssim;
};

inline MetricReport evaluate_metrics(const VideoVolume& u, const VideoVolume& g) {
  MetricReport r;
  r.psnr = psnr(u, g);
  r.ssim = ssim(u, g);
  r.opt_value = outer_objective(u, g);
  const Dims& d = u.dims();
  const std::size_t n = d.w * d.h;
  for (std::size_t t = 0; t < d.t; ++t) {
    double se = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = u[t * n + i] - g[t * n + i];
      se += e * e;
    }
    r.frame_psnr.push_back(se == 0.0 ? std::numeric_limits<double>::infinity()
                                     : 10.0 * std::log10(static_cast<double>(n) / se));
    r.frame_ssim.push_back(ssim_frame(u, g, t));
  }
  return r;
}

}  // namespace dynreg
