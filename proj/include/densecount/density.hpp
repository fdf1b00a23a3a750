#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "densecount/annotations.hpp"
#include "densecount/density_map.hpp"
#include "densecount/error.hpp"
#include "densecount/io_util.hpp"

namespace densecount {

enum class KernelMode { constant, adaptive };

struct KernelSpec {
  KernelMode mode = KernelMode::constant;
  double sigma = 6.0;      // constant mode, pixels
  double sigma0_sq = 0.3;  // adaptive mode: sigma_i^2 = sigma0_sq * d_avg_i
  int k = 3;               // adaptive mode neighbor count
  double truncation_radius_sigmas = 4.0;

  void validate() const {
    if (!(truncation_radius_sigmas >= 3.0) || !std::isfinite(truncation_radius_sigmas))
      throw UsageError("kernel: truncation_radius_sigmas must be >= 3");
    if (mode == KernelMode::constant) {
      if (!(sigma > 0.0) || !std::isfinite(sigma))
        throw UsageError("kernel: sigma must be > 0 in constant mode");
    } else {
      if (!(sigma0_sq > 0.0) || !std::isfinite(sigma0_sq))
        throw UsageError("kernel: sigma0_sq must be > 0 in adaptive mode");
      if (k < 1) throw UsageError("kernel: k must be >= 1 in adaptive mode");
    }
  }

  static KernelSpec constant(double sigma, double truncation = 4.0) {
    KernelSpec s;
    s.mode = KernelMode::constant;
    s.sigma = sigma;
    s.truncation_radius_sigmas = truncation;
    return s;
  }

  static KernelSpec adaptive(double sigma0_sq, int k, double truncation = 4.0) {
    KernelSpec s;
    s.mode = KernelMode::adaptive;
    s.sigma0_sq = sigma0_sq;
    s.k = k;
    s.truncation_radius_sigmas = truncation;
    return s;
  }
};

namespace detail {

// Dots in (y, x) order. Accumulating in this order makes the map independent
// of the caller's dot order, bit for bit.
inline std::vector<std::size_t> canonical_order(std::span<const DotAnnotation> dots) {
  std::vector<std::size_t> order(dots.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dots[a].y != dots[b].y) return dots[a].y < dots[b].y;
    return dots[a].x < dots[b].x;
  });
  return order;
}

// Adds a unit-mass Gaussian sampled at pixel centers within radius of (x, y).
// The kernel is evaluated relative to the anchor pixel floor(x), floor(y), so
// integer translations reproduce it exactly. The nearest pixel is always in
// the support, which keeps tiny sigmas well defined.
inline void splat_gaussian(std::vector<double>& acc, int width, int height, double x, double y,
                           double sigma, double radius_sigmas) {
  const double ax = std::floor(x);
  const double ay = std::floor(y);
  const double fx = x - ax;
  const double fy = y - ay;
  const int ix = static_cast<int>(ax);
  const int iy = static_cast<int>(ay);
  const int near_x = std::min(ix + (fx >= 0.5 ? 1 : 0), width - 1);
  const int near_y = std::min(iy + (fy >= 0.5 ? 1 : 0), height - 1);

  const double var = sigma * sigma;
  if (!(var > 0.0) || !std::isfinite(var)) {
    acc[static_cast<std::size_t>(near_y) * static_cast<std::size_t>(width) +
        static_cast<std::size_t>(near_x)] += 1.0;
    return;
  }

  const double radius = radius_sigmas * sigma;
  const double radius_sq = radius * radius;
  const int half = static_cast<int>(std::ceil(radius)) + 1;
  const int x0 = std::max(0, ix - half), x1 = std::min(width - 1, ix + half);
  const int y0 = std::max(0, iy - half), y1 = std::min(height - 1, iy + half);
  const int span_w = x1 - x0 + 1;
  const int span_h = y1 - y0 + 1;

  // First pass: squared distances of the support (negative marks "outside").
  std::vector<double> weight(static_cast<std::size_t>(span_w) * static_cast<std::size_t>(span_h),
                             -1.0);
  double min_d2 = std::numeric_limits<double>::infinity();
  for (int py = y0; py <= y1; ++py) {
    const double dy = static_cast<double>(py - iy) - fy;
    for (int px = x0; px <= x1; ++px) {
      const double dx = static_cast<double>(px - ix) - fx;
      const double d2 = dx * dx + dy * dy;
      if (d2 <= radius_sq || (px == near_x && py == near_y)) {
        weight[static_cast<std::size_t>(py - y0) * static_cast<std::size_t>(span_w) +
               static_cast<std::size_t>(px - x0)] = d2;
        min_d2 = std::min(min_d2, d2);
      }
    }
  }

  // Shifting the exponent by the smallest distance cancels in the
  // normalization and keeps exp() away from underflow.
  double total = 0.0;
  for (double& w : weight) {
    if (w < 0.0) {
      w = 0.0;
      continue;
    }
    w = std::exp(-(w - min_d2) / (2.0 * var));
    total += w;
  }

  for (int py = y0; py <= y1; ++py) {
    const std::size_t row = static_cast<std::size_t>(py) * static_cast<std::size_t>(width);
    const std::size_t wrow = static_cast<std::size_t>(py - y0) * static_cast<std::size_t>(span_w);
    for (int px = x0; px <= x1; ++px) {
      const double w = weight[wrow + static_cast<std::size_t>(px - x0)];
      if (w != 0.0) acc[row + static_cast<std::size_t>(px)] += w / total;
    }
  }
}

inline DensityMap to_density_map(const std::vector<double>& acc, int width, int height) {
  DensityMap out(width, height);
  for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i]);
  return out;
}

}  // namespace detail

/// Sum of unit-mass truncated Gaussians with a common sigma, one per dot.
inline DensityMap gaussian_density_map(const AnnotatedImage& img, const KernelSpec& spec) {
  if (spec.mode != KernelMode::constant)
    throw UsageError("gaussian_density_map requires a constant-mode kernel");
  spec.validate();
  img.validate();
  std::vector<double> acc(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height),
                          0.0);
  for (std::size_t i : detail::canonical_order(img.dots))
    detail::splat_gaussian(acc, img.width, img.height, img.dots[i].x, img.dots[i].y, spec.sigma,
                           spec.truncation_radius_sigmas);
  return detail::to_density_map(acc, img.width, img.height);
}

/// Mean Euclidean distance from each point to its k nearest other points,
/// with k clipped to n - 1. Neighbor ties break by input index.
inline std::vector<double> knn_avg_distance(std::span<const DotAnnotation> points, int k) {
  if (points.size() < 2)
    throw InsufficientNeighborsError("knn_avg_distance needs at least 2 points, got " +
                                     std::to_string(points.size()));
  if (k < 1) throw UsageError("knn_avg_distance: k must be >= 1");
  const std::size_t n = points.size();
  const std::size_t keff = std::min<std::size_t>(static_cast<std::size_t>(k), n - 1);

  std::vector<double> out(n);
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = points[i].x - points[j].x;
      const double dy = points[i].y - points[j].y;
      cand.emplace_back(std::sqrt(dx * dx + dy * dy), j);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keff), cand.end());
    double sum = 0.0;
    for (std::size_t m = 0; m < keff; ++m) sum += cand[m].first;
    out[i] = sum / static_cast<double>(keff);
  }
  return out;
}

// Adaptive mode on fewer than two dots uses a constant sigma = sqrt(sigma0_sq).
inline bool adaptive_falls_back(const AnnotatedImage& img) { return img.dots.size() < 2; }

/// Per-dot variance sigma_i^2 = sigma0_sq * d_avg_i from the k-NN distances.
inline std::vector<double> adaptive_sigmas(const AnnotatedImage& img, const KernelSpec& spec) {
  if (adaptive_falls_back(img))
    return std::vector<double>(img.dots.size(), std::sqrt(spec.sigma0_sq));
  auto davg = knn_avg_distance(img.dots, spec.k);
  std::vector<double> sigmas(davg.size());
  for (std::size_t i = 0; i < davg.size(); ++i) sigmas[i] = std::sqrt(spec.sigma0_sq * davg[i]);
  return sigmas;
}

inline DensityMap adaptive_density_map(const AnnotatedImage& img, const KernelSpec& spec) {
  if (spec.mode != KernelMode::adaptive)
    throw UsageError("adaptive_density_map requires an adaptive-mode kernel");
  spec.validate();
  img.validate();
  const auto sigmas = adaptive_sigmas(img, spec);
  std::vector<double> acc(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height),
                          0.0);
  for (std::size_t i : detail::canonical_order(img.dots))
    detail::splat_gaussian(acc, img.width, img.height, img.dots[i].x, img.dots[i].y, sigmas[i],
                           spec.truncation_radius_sigmas);
  return detail::to_density_map(acc, img.width, img.height);
}

inline DensityMap density_map(const AnnotatedImage& img, const KernelSpec& spec) {
  return spec.mode == KernelMode::constant ? gaussian_density_map(img, spec)
                                           : adaptive_density_map(img, spec);
}

/// Object count: sum of all pixels, accumulated in double, row-major.
inline double integrate_count(const DensityMap& dm) {
  double sum = 0.0;
  for (float v : dm.values) sum += static_cast<double>(v);
  return sum;
}

inline DensityMap scaled(const DensityMap& dm, double factor) {
  DensityMap out = dm;
  for (float& v : out.values) v = static_cast<float>(static_cast<double>(v) * factor);
  return out;
}

// ---- DMAP binary format ------------------------------------------------
// "DMAP", u8 version (1), u32 width, u32 height, width*height f32; all LE.

inline constexpr std::uint8_t kDmapVersion = 1;
inline constexpr std::uint64_t kDmapMaxElements = std::uint64_t{1} << 30;

inline void write_density_map(const DensityMap& dm, std::ostream& os) {
  if (dm.width <= 0 || dm.height <= 0)
    throw FormatError("DMAP: cannot write degenerate dimensions " + std::to_string(dm.width) +
                      "x" + std::to_string(dm.height));
  io::write_bytes(os, "DMAP");
  io::write_u8(os, kDmapVersion);
  io::write_u32(os, static_cast<std::uint32_t>(dm.width));
  io::write_u32(os, static_cast<std::uint32_t>(dm.height));
  os.write(reinterpret_cast<const char*>(dm.values.data()),
           static_cast<std::streamsize>(dm.values.size() * sizeof(float)));
  if (!os) throw IoError("DMAP: write failed");
}

inline DensityMap read_density_map(std::istream& is) {
  char magic[4];
  if (!io::read_exact(is, magic, 4)) throw FormatError("DMAP: truncated header");
  if (std::string_view(magic, 4) != "DMAP")
    throw FormatError("DMAP: bad magic '" + std::string(magic, 4) + "'");
  auto version = io::read_u8(is);
  if (!version) throw FormatError("DMAP: truncated header");
  if (*version != kDmapVersion)
    throw FormatError("DMAP: unsupported version " + std::to_string(*version));
  auto w = io::read_u32(is);
  auto h = io::read_u32(is);
  if (!w || !h) throw FormatError("DMAP: truncated header");
  if (*w == 0 || *h == 0)
    throw FormatError("DMAP: degenerate dimensions " + std::to_string(*w) + "x" +
                      std::to_string(*h));
  const std::uint64_t count = std::uint64_t{*w} * std::uint64_t{*h};
  if (*w > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) ||
      *h > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) ||
      count > kDmapMaxElements)
    throw FormatError("DMAP: dimensions " + std::to_string(*w) + "x" + std::to_string(*h) +
                      " overflow the element limit");

  DensityMap dm(static_cast<int>(*w), static_cast<int>(*h));
  const std::size_t bytes = static_cast<std::size_t>(count) * sizeof(float);
  if (!io::read_exact(is, reinterpret_cast<char*>(dm.values.data()), bytes))
    throw FormatError("DMAP: truncated payload, expected " + std::to_string(bytes) + " bytes");
  if (!io::at_eof(is)) throw FormatError("DMAP: trailing bytes after payload");
  try {
    dm.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("DMAP: ") + e.what());
  }
  return dm;
}

inline void write_density_map_file(const DensityMap& dm, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_density_map(dm, os);
}

inline DensityMap read_density_map_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_density_map(is);
}

}  // namespace densecount
