#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynreg/random.hpp"
#include "dynreg/volume.hpp"

namespace dynreg {

enum class IoErrorKind { open_failed, bad_magic, bad_header, truncated, mismatched_frames, write_failed };

inline const char* to_string(IoErrorKind k) {
  switch (k) {
    case IoErrorKind::open_failed: return "open failed";
    case IoErrorKind::bad_magic: return "bad magic";
    case IoErrorKind::bad_header: return "bad header";
    case IoErrorKind::truncated: return "truncated";
    case IoErrorKind::mismatched_frames: return "mismatched frames";
    case IoErrorKind::write_failed: return "write failed";
  }
  return "unknown";
}

class IoError : public std::runtime_error {
 public:
  IoError(IoErrorKind kind, const std::string& where, const std::string& detail = {})
      : std::runtime_error(where + ": " + to_string(kind) + (detail.empty() ? "" : " (" + detail + ")")), kind_(kind) {}
  IoErrorKind kind() const noexcept { return kind_; }

 private:
  IoErrorKind kind_;
};

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xFF);
    return r;
  }
  return v;
}

// Reads one whitespace-delimited decimal token >= 1 from a PGM-style header, skipping comments.
inline bool read_header_uint(std::istream& in, std::size_t& out) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      break;
    }
  }
  std::string tok;
  while (std::isdigit(in.peek())) tok.push_back(static_cast<char>(in.get()));
  if (tok.empty() || tok.size() > 12) return false;
  out = std::stoull(tok);
  return true;
}

}  // namespace detail

inline constexpr char vvol_magic[] = "VVOL1\n";

inline void write_vvol(const std::filesystem::path& path, const VideoVolume& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(IoErrorKind::open_failed, path.string());
  const Dims& d = v.dims();
  out << vvol_magic << d.w << ' ' << d.h << ' ' << d.t << '\n';
  std::vector<std::uint64_t> buf(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) buf[i] = detail::to_le(std::bit_cast<std::uint64_t>(v[i]));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 8));
  if (!out) throw IoError(IoErrorKind::write_failed, path.string());
}

inline VideoVolume read_vvol(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorKind::open_failed, path.string());
  char magic[6]{};
  in.read(magic, 6);
  if (in.gcount() != 6 || std::memcmp(magic, vvol_magic, 6) != 0) throw IoError(IoErrorKind::bad_magic, path.string());

  std::string header;
  if (!std::getline(in, header)) throw IoError(IoErrorKind::bad_header, path.string(), "missing dimensions");
  std::istringstream hs(header);
  long long w = 0, h = 0, t = 0;
  std::string extra;
  if (!(hs >> w >> h >> t) || (hs >> extra)) throw IoError(IoErrorKind::bad_header, path.string(), header);
  if (w < 1 || h < 1 || t < 1) throw IoError(IoErrorKind::bad_header, path.string(), "dimensions must be >= 1");
  const Dims d{static_cast<std::size_t>(w), static_cast<std::size_t>(h), static_cast<std::size_t>(t)};
  if (d.w > (1ULL << 40) / d.h / d.t) throw IoError(IoErrorKind::bad_header, path.string(), "volume too large");

  std::vector<std::uint64_t> buf(d.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 8));
  if (static_cast<std::size_t>(in.gcount()) != buf.size() * 8)
    throw IoError(IoErrorKind::truncated, path.string(),
                  "expected " + std::to_string(buf.size() * 8) + " payload bytes, got " + std::to_string(in.gcount()));
  std::vector<double> values(d.size());
  for (std::size_t i = 0; i < buf.size(); ++i) values[i] = std::bit_cast<double>(detail::to_le(buf[i]));
  return VideoVolume(d, std::move(values));
}

/// One binary PGM ("P5", maxval up to 65535) as values normalised to [0, 1].
struct PgmImage {
  std::size_t w = 0, h = 0;
  std::vector<double> values;
};

inline PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorKind::open_failed, path.string());
  char magic[2]{};
  in.read(magic, 2);
  if (in.gcount() != 2 || magic[0] != 'P' || magic[1] != '5') throw IoError(IoErrorKind::bad_magic, path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  if (!detail::read_header_uint(in, w) || !detail::read_header_uint(in, h) || !detail::read_header_uint(in, maxval))
    throw IoError(IoErrorKind::bad_header, path.string());
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw IoError(IoErrorKind::bad_header, path.string());
  if (!std::isspace(in.get())) throw IoError(IoErrorKind::bad_header, path.string());

  const std::size_t bpp = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(w * h * bpp);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw IoError(IoErrorKind::truncated, path.string());
  PgmImage img{w, h, std::vector<double>(w * h)};
  for (std::size_t i = 0; i < w * h; ++i) {
    const unsigned v = bpp == 2 ? (unsigned{raw[2 * i]} << 8) | raw[2 * i + 1] : raw[i];
    img.values[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

/// Clamps to [0, 1], then quantises with round-half-away-from-zero.
inline void write_pgm(const std::filesystem::path& path, std::size_t w, std::size_t h, const double* values,
                      unsigned maxval = 255) {
  if (maxval < 1 || maxval > 65535) throw std::invalid_argument("maxval must lie in [1, 65535]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(IoErrorKind::open_failed, path.string());
  out << "P5\n" << w << ' ' << h << '\n' << maxval << '\n';
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(w * h * bpp);
  for (std::size_t i = 0; i < w * h; ++i) {
    const double c = std::isnan(values[i]) ? 0.0 : std::clamp(values[i], 0.0, 1.0);
    const auto q = static_cast<unsigned>(std::round(c * maxval));
    if (bpp == 2) {
      raw[2 * i] = static_cast<unsigned char>(q >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(q & 0xFF);
    } else {
      raw[i] = static_cast<unsigned char>(q);
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError(IoErrorKind::write_failed, path.string());
}

/// Frames are the *.pgm files of `dir` in lexicographic filename order, or a single file.
inline VideoVolume import_pgm_sequence(const std::filesystem::path& source) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_directory(source)) {
    for (const auto& e : fs::directory_iterator(source))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else if (fs::exists(source)) {
    files.push_back(source);
  }
  if (files.empty()) throw IoError(IoErrorKind::open_failed, source.string(), "no .pgm frames found");

  std::vector<double> values;
  std::size_t w = 0, h = 0;
  for (const auto& f : files) {
    PgmImage img = read_pgm(f);
    if (values.empty()) {
      w = img.w;
      h = img.h;
    } else if (img.w != w || img.h != h) {
      throw IoError(IoErrorKind::mismatched_frames, f.string(),
                    std::to_string(img.w) + "x" + std::to_string(img.h) + " vs " + std::to_string(w) + "x" +
                        std::to_string(h));
    }
    values.insert(values.end(), img.values.begin(), img.values.end());
  }
  return VideoVolume(Dims{w, h, files.size()}, std::move(values));
}

/// Writes `prefix`0000.pgm, `prefix`0001.pgm, ... into `dir` (created if missing).
inline std::vector<std::filesystem::path> export_pgm_sequence(const VideoVolume& v, const std::filesystem::path& dir,
                                                              unsigned maxval = 255,
                                                              const std::string& prefix = "frame") {
  std::filesystem::create_directories(dir);
  const Dims& d = v.dims();
  std::vector<std::filesystem::path> written;
  for (std::size_t t = 0; t < d.t; ++t) {
    std::ostringstream name;
    name << prefix << std::setw(4) << std::setfill('0') << t << ".pgm";
    written.push_back(dir / name.str());
    write_pgm(written.back(), d.w, d.h, v.values().data() + t * d.w * d.h, maxval);
  }
  return written;
}

/// Interleaved RGB frame with channel values in [0, 1].
struct RgbFrame {
  std::size_t w = 0, h = 0;
  std::vector<double> rgb;  // 3 * w * h
};

namespace detail {

// Overlap of source cell [i, i+1) with target cell k of width `scale`, in source units.
inline double cell_overlap(std::size_t i, std::size_t k, double scale) {
  const double lo = std::max(static_cast<double>(i), static_cast<double>(k) * scale);
  const double hi = std::min(static_cast<double>(i + 1), static_cast<double>(k + 1) * scale);
  return std::max(0.0, hi - lo);
}

}  // namespace detail

/// Source frame index used for target frame k when subsampling t_src frames to t_dst.
inline std::size_t subsample_index(std::size_t k, std::size_t t_src, std::size_t t_dst) {
  return (k * t_src) / t_dst;
}

/// Luma conversion, area-weighted box downsampling to w x h, uniform frame subsampling to t.
inline VideoVolume rgb_to_gray_downsample(const std::vector<RgbFrame>& frames, std::size_t w, std::size_t h,
                                          std::size_t t) {
  if (w == 0 || h == 0 || t == 0) throw std::invalid_argument("target dimensions must be positive");
  if (frames.empty()) throw std::invalid_argument("no input frames");
  const std::size_t sw = frames.front().w, sh = frames.front().h;
  for (const auto& f : frames)
    if (f.w != sw || f.h != sh || f.rgb.size() != 3 * sw * sh)
      throw IoError(IoErrorKind::mismatched_frames, "rgb_to_gray_downsample");
  if (w > sw || h > sh || t > frames.size())
    throw std::invalid_argument("target dimensions exceed the source " + std::to_string(sw) + "x" +
                                std::to_string(sh) + "x" + std::to_string(frames.size()));

  const double sx = static_cast<double>(sw) / static_cast<double>(w);
  const double sy = static_cast<double>(sh) / static_cast<double>(h);
  VideoVolume out(Dims{w, h, t});
  std::vector<double> gray(sw * sh);
  for (std::size_t k = 0; k < t; ++k) {
    const RgbFrame& f = frames[subsample_index(k, frames.size(), t)];
    for (std::size_t i = 0; i < sw * sh; ++i)
      gray[i] = 0.299 * f.rgb[3 * i] + 0.587 * f.rgb[3 * i + 1] + 0.114 * f.rgb[3 * i + 2];
    for (std::size_t y = 0; y < h; ++y) {
      const auto y0 = static_cast<std::size_t>(std::floor(static_cast<double>(y) * sy));
      const auto y1 = std::min(sh, static_cast<std::size_t>(std::ceil(static_cast<double>(y + 1) * sy)));
      for (std::size_t x = 0; x < w; ++x) {
        const auto x0 = static_cast<std::size_t>(std::floor(static_cast<double>(x) * sx));
        const auto x1 = std::min(sw, static_cast<std::size_t>(std::ceil(static_cast<double>(x + 1) * sx)));
        double acc = 0.0, area = 0.0;
        for (std::size_t yy = y0; yy < y1; ++yy) {
          const double wy = detail::cell_overlap(yy, y, sy);
          for (std::size_t xx = x0; xx < x1; ++xx) {
            const double a = wy * detail::cell_overlap(xx, x, sx);
            acc += a * gray[yy * sw + xx];
            area += a;
          }
        }
        out(x, y, k) = acc / area;
      }
    }
  }
  return out;
}

struct NoiseSpec {
  double variance = 0.02;
  std::uint64_t seed = 0;
};

/// v + sigma z with z standard normal per voxel; no clipping.
inline VideoVolume add_noise(const VideoVolume& v, const NoiseSpec& spec) {
  if (!(spec.variance >= 0.0) || !std::isfinite(spec.variance)) throw std::invalid_argument("noise variance must be >= 0");
  VideoVolume out = v;
  if (spec.variance == 0.0) return out;
  const double sigma = std::sqrt(spec.variance);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sigma * standard_normal(spec.seed, 0, i);
  return out;
}

enum class SynthKind { moving_square, panning_gradient, switching_scene };

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "moving-square") return SynthKind::moving_square;
  if (s == "panning-gradient") return SynthKind::panning_gradient;
  if (s == "switching-scene") return SynthKind::switching_scene;
  throw std::invalid_argument("unknown synthetic kind '" + s + "' (moving-square, panning-gradient, switching-scene)");
}

inline const char* cli_name(SynthKind k) {
  switch (k) {
    case SynthKind::moving_square: return "moving-square";
    case SynthKind::panning_gradient: return "panning-gradient";
    case SynthKind::switching_scene: return "switching-scene";
  }
  return "?";
}

struct SquareGeometry {
  std::size_t size;  // block edge length
  std::size_t y0;    // top row of the block
  std::size_t x0;    // left column at t = 0
  std::size_t max_x0;
};

inline SquareGeometry moving_square_geometry(const Dims& d) {
  const std::size_t size = std::max<std::size_t>(1, std::min(d.w, d.h) / 4);
  const std::size_t y0 = std::min(d.h / 4, d.h - size);
  const std::size_t x0 = std::min(d.w / 8, d.w - size);
  return {size, y0, x0, d.w - size};
}

/// Clean synthetic sequences with values in [0, 1].
///  moving-square:    background 0.2, a static 0.5 bar over the lower third, a 0.9 block moving
///                    one pixel right per frame until it reaches the border.
///  panning-gradient: smooth texture drifting one pixel right per frame, u(x+1, y, t+1) = u(x, y, t).
///  switching-scene:  two static halves A | B that swap to B | A half-way through.
/// The seed varies the texture phases of panning-gradient and switching-scene.
inline VideoVolume synth_sequence(SynthKind kind, const Dims& d, std::uint64_t seed = 0) {
  if (d.w == 0 || d.h == 0 || d.t == 0) throw std::invalid_argument("synthetic dimensions must be positive");
  VideoVolume v(d);
  const double pi = std::acos(-1.0);
  const double phase1 = 2.0 * pi * uniform_open01(seed, 7, 0);
  const double phase2 = 2.0 * pi * uniform_open01(seed, 7, 1);
  const auto fw = static_cast<double>(d.w), fh = static_cast<double>(d.h);
  switch (kind) {
    case SynthKind::moving_square: {
      const SquareGeometry g = moving_square_geometry(d);
      const std::size_t bar_y0 = d.h - d.h / 3;
      for (std::size_t t = 0; t < d.t; ++t) {
        const std::size_t bx = std::min(g.x0 + t, g.max_x0);
        for (std::size_t y = 0; y < d.h; ++y)
          for (std::size_t x = 0; x < d.w; ++x) {
            double val = y >= bar_y0 && d.h >= 3 ? 0.5 : 0.2;
            if (y >= g.y0 && y < g.y0 + g.size && x >= bx && x < bx + g.size) val = 0.9;
            v(x, y, t) = val;
          }
      }
      break;
    }
    case SynthKind::panning_gradient: {
      for (std::size_t t = 0; t < d.t; ++t)
        for (std::size_t y = 0; y < d.h; ++y)
          for (std::size_t x = 0; x < d.w; ++x) {
            const double s = static_cast<double>(x) - static_cast<double>(t);
            const double yy = static_cast<double>(y);
            v(x, y, t) = 0.5 + 0.25 * std::sin(2.0 * pi * s / fw + phase1) +
                         0.15 * std::cos(2.0 * pi * (s / fw + 2.0 * yy / fh) + phase2) + 0.05 * std::cos(pi * yy / fh);
          }
      break;
    }
    case SynthKind::switching_scene: {
      const std::size_t half = d.w / 2;
      const auto scene = [&](int which, std::size_t x, std::size_t y) {
        const double xx = static_cast<double>(x), yy = static_cast<double>(y);
        if (which == 0) return (x / 4 + y / 4) % 2 == 0 ? 0.8 : 0.3;  // checkerboard
        return 0.5 + 0.3 * std::sin(2.0 * pi * (xx + yy) / std::max(4.0, fw / 2.0) + phase1);
      };
      for (std::size_t t = 0; t < d.t; ++t) {
        const bool swapped = t >= d.t / 2 && d.t > 1;
        for (std::size_t y = 0; y < d.h; ++y)
          for (std::size_t x = 0; x < d.w; ++x) {
            const bool left = x < half;
            const int which = (left != swapped) ? 0 : 1;
            v(x, y, t) = scene(which, left ? x : x - half, y);
          }
      }
      break;
    }
  }
  return v;
}

}  // namespace dynreg
