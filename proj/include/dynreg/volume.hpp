#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynreg {

/// Extent of a video grid. Storage is x-fastest, then y, then t.
struct Dims {
  std::size_t w = 1;
  std::size_t h = 1;
  std::size_t t = 1;

  [[nodiscard]] constexpr std::size_t size() const noexcept { return w * h * t; }
  [[nodiscard]] constexpr std::size_t index(std::size_t x, std::size_t y, std::size_t tt) const noexcept {
    return x + w * (y + h * tt);
  }
  [[nodiscard]] constexpr bool valid() const noexcept { return w >= 1 && h >= 1 && t >= 1; }

  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.w) + "x" + std::to_string(d.h) + "x" + std::to_string(d.t);
}

inline void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch " + to_string(a) + " vs " +
                                to_string(b));
  }
}

/// Scalar field on a W x H x T grid with unit mesh size.
class VideoVolume {
 public:
  VideoVolume() = default;

  explicit VideoVolume(Dims dims, double fill = 0.0) : dims_(dims), data_(dims.size(), fill) {
    if (!dims.valid()) throw std::invalid_argument("VideoVolume: every extent must be >= 1");
  }

  VideoVolume(Dims dims, std::vector<double> data) : dims_(dims), data_(std::move(data)) {
    if (!dims.valid()) throw std::invalid_argument("VideoVolume: every extent must be >= 1");
    if (data_.size() != dims.size()) throw std::invalid_argument("VideoVolume: data length != W*H*T");
  }

  [[nodiscard]] const Dims& dims() const noexcept { return dims_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<double> span() noexcept { return data_; }
  [[nodiscard]] std::span<const double> span() const noexcept { return data_; }
  [[nodiscard]] std::vector<double>& values() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator()(std::size_t x, std::size_t y, std::size_t t) noexcept { return data_[dims_.index(x, y, t)]; }
  double operator()(std::size_t x, std::size_t y, std::size_t t) const noexcept {
    return data_[dims_.index(x, y, t)];
  }

  [[nodiscard]] bool all_finite() const noexcept {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  VideoVolume& operator+=(const VideoVolume& o) {
    require_same_dims(dims_, o.dims_, "VideoVolume::operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  VideoVolume& operator-=(const VideoVolume& o) {
    require_same_dims(dims_, o.dims_, "VideoVolume::operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  VideoVolume& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend VideoVolume operator+(VideoVolume a, const VideoVolume& b) { return a += b; }
  friend VideoVolume operator-(VideoVolume a, const VideoVolume& b) { return a -= b; }
  friend VideoVolume operator*(double s, VideoVolume a) { return a *= s; }

  friend bool operator==(const VideoVolume&, const VideoVolume&) = default;

 private:
  Dims dims_{};
  std::vector<double> data_;
};

/// Three components (dx, dy, dt) per voxel.
struct VectorField3 {
  Dims dims{};
  std::vector<double> dx, dy, dt;

  VectorField3() = default;
  explicit VectorField3(Dims d) : dims(d), dx(d.size(), 0.0), dy(d.size(), 0.0), dt(d.size(), 0.0) {}

  [[nodiscard]] std::size_t size() const noexcept { return dx.size(); }
  [[nodiscard]] double norm_at(std::size_t i) const noexcept {
    return std::sqrt(dx[i] * dx[i] + dy[i] * dy[i] + dt[i] * dt[i]);
  }
  void fill(double v) {
    std::fill(dx.begin(), dx.end(), v);
    std::fill(dy.begin(), dy.end(), v);
    std::fill(dt.begin(), dt.end(), v);
  }
  [[nodiscard]] bool all_finite() const noexcept {
    for (std::size_t i = 0; i < size(); ++i)
      if (!std::isfinite(dx[i]) || !std::isfinite(dy[i]) || !std::isfinite(dt[i])) return false;
    return true;
  }
};

/// Symmetric 3x3 matrix per voxel, upper triangle stored.
struct MatrixField3 {
  Dims dims{};
  std::vector<double> xx, xy, xt, yy, yt, tt;

  MatrixField3() = default;
  explicit MatrixField3(Dims d)
      : dims(d),
        xx(d.size(), 0.0),
        xy(d.size(), 0.0),
        xt(d.size(), 0.0),
        yy(d.size(), 0.0),
        yt(d.size(), 0.0),
        tt(d.size(), 0.0) {}

  [[nodiscard]] std::size_t size() const noexcept { return xx.size(); }

  /// out = M(i) * (a, b, c)
  void apply_at(std::size_t i, double a, double b, double c, double& oa, double& ob, double& oc) const noexcept {
    oa = xx[i] * a + xy[i] * b + xt[i] * c;
    ob = xy[i] * a + yy[i] * b + yt[i] * c;
    oc = xt[i] * a + yt[i] * b + tt[i] * c;
  }
};

// Flat-vector helpers shared by the solvers.

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

/// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) noexcept {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double dot(const VideoVolume& a, const VideoVolume& b) {
  require_same_dims(a.dims(), b.dims(), "dot");
  return dot(a.span(), b.span());
}

inline double dot(const VectorField3& a, const VectorField3& b) {
  require_same_dims(a.dims, b.dims, "dot");
  return dot(a.dx, b.dx) + dot(a.dy, b.dy) + dot(a.dt, b.dt);
}

inline double sum(std::span<const double> a) noexcept {
  double s = 0.0;
  for (double v : a) s += v;
  return s;
}

}  // namespace dynreg
