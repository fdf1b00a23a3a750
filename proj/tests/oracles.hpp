#pragma once

// Reference implementations used only by tests. They follow the textbook
// definitions directly and share no code with the library paths they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "densecount/annotations.hpp"
#include "densecount/tensor.hpp"

namespace densecount::oracle {

// Sum over dots of an isotropic Gaussian PDF evaluated at every pixel
// center, no truncation, each kernel rescaled to unit mass over the image.
inline std::vector<double> naive_density(const AnnotatedImage& img, const std::vector<double>& sigmas) {
  const std::size_t W = static_cast<std::size_t>(img.width), H = static_cast<std::size_t>(img.height);
  std::vector<double> out(W * H, 0.0);
  std::vector<double> kernel(W * H);
  for (std::size_t d = 0; d < img.dots.size(); ++d) {
    const double s2 = sigmas[d] * sigmas[d];
    double total = 0.0;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double dx = static_cast<double>(x) - img.dots[d].x;
        const double dy = static_cast<double>(y) - img.dots[d].y;
        const double pdf = std::exp(-(dx * dx + dy * dy) / (2.0 * s2)) / (2.0 * std::numbers::pi * s2);
        kernel[y * W + x] = pdf;
        total += pdf;
      }
    for (std::size_t i = 0; i < W * H; ++i) out[i] += kernel[i] / total;
  }
  return out;
}

// Mean of the k smallest distances after fully sorting every pairwise distance.
inline std::vector<double> brute_knn(const std::vector<DotAnnotation>& pts, int k) {
  std::vector<double> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> dist;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (i == j) continue;
      const double dx = pts[i].x - pts[j].x, dy = pts[i].y - pts[j].y;
      dist.push_back(std::sqrt(dx * dx + dy * dy));
    }
    std::sort(dist.begin(), dist.end());
    const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), dist.size());
    double s = 0.0;
    for (std::size_t m = 0; m < kk; ++m) s += dist[m];
    out.push_back(s / static_cast<double>(kk));
  }
  return out;
}

inline double kahan_sum(const std::vector<float>& v) {
  double sum = 0.0, c = 0.0;
  for (float f : v) {
    const double y = static_cast<double>(f) - c;
    const double t = sum + y;
    c = (t - sum) - y;
    sum = t;
  }
  return sum;
}

// Direct six-nested-loop "same" cross-correlation.
template <typename T>
BasicTensor<T> naive_conv(const BasicTensor<T>& in, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  const std::size_t B = in.dim(0), Ci = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  BasicTensor<T> out({B, Co, H, W});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          double acc = static_cast<double>(b[o]);
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y + i) - static_cast<long>(kh / 2);
                const long ix = static_cast<long>(x + j) - static_cast<long>(kw / 2);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += static_cast<double>(in.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))) *
                       static_cast<double>(w.at(o, c, i, j));
              }
          out.at(n, o, y, x) = static_cast<T>(acc);
        }
  return out;
}

// Central difference of f with respect to values[i], step h.
inline double central_difference(std::vector<double>& values, std::size_t i, double h,
                                 const std::function<double()>& f) {
  const double saved = values[i];
  values[i] = saved + h;
  const double up = f();
  values[i] = saved - h;
  const double down = f();
  values[i] = saved;
  return (up - down) / (2.0 * h);
}

// |a - n| / max(|a|, |n|), with both-tiny gradients treated as agreeing.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < floor) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

template <typename T>
BasicTensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  BasicTensor<T> t(shape);
  for (auto& v : t.storage()) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace densecount::oracle
