#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "densecount/annotations.hpp"
#include "densecount/error.hpp"
#include "densecount/image_io.hpp"
#include "densecount/tensor.hpp"

namespace densecount {

enum class Background { flat, gradient, speckle };

struct SceneSpec {
  int width = 128;
  int height = 128;
  int channels = 1;
  int n_min = 0;
  int n_max = 10;
  double radius_min = 3.0;
  double radius_max = 6.0;
  Background background = Background::speckle;
  double glare_probability = 0.2;
  double glare_intensity = 0.35;
  double min_separation = 8.0;
  std::uint64_t seed = 42;

  void validate() const {
    if (width < 1 || height < 1) throw UsageError("scene: image size must be positive");
    if (channels != 1 && channels != 3) throw UsageError("scene: channels must be 1 or 3");
    if (n_min < 0 || n_min > n_max) throw UsageError("scene: need 0 <= n_min <= n_max");
    if (!(radius_min > 0.0) || radius_min > radius_max)
      throw UsageError("scene: need 0 < radius_min <= radius_max");
    if (!(min_separation >= 0.0)) throw UsageError("scene: min_separation must be >= 0");
    if (!(glare_probability >= 0.0 && glare_probability <= 1.0))
      throw UsageError("scene: glare_probability must be in [0, 1]");
  }
};

struct Scene {
  Tensor image;  // [C,H,W], quantized to multiples of 1/255
  AnnotatedImage truth;
};

inline constexpr int kMaxPlacementAttempts = 10000;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Per-scene stream: depends only on (seed, index).
inline std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(splitmix64(seed ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
}

inline double smoothstep(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace detail

/// Draws one scene: n ~ U{n_min..n_max} soft-edged dark ellipses placed with
/// rejection sampling for separation, over a flat/gradient/speckle background
/// with an optional additive glare blotch. Dots are the exact ellipse centers.
inline Scene generate_scene(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  auto rng = detail::scene_rng(spec.seed, index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const int n = std::uniform_int_distribution<int>(spec.n_min, spec.n_max)(rng);
  const double W = spec.width, H = spec.height;

  // Centers stay one max-radius from the border when the image allows it.
  const double mx = W > 2 * spec.radius_max ? spec.radius_max : 0.0;
  const double my = H > 2 * spec.radius_max ? spec.radius_max : 0.0;
  std::vector<DotAnnotation> centers;
  int attempts = 0;
  while (static_cast<int>(centers.size()) < n) {
    if (++attempts > kMaxPlacementAttempts)
      throw InfeasibleSpecError("scene " + std::to_string(index) + ": could not place " +
                                std::to_string(n) + " objects " +
                                io::format_double(spec.min_separation) + " px apart in " +
                                std::to_string(spec.width) + "x" + std::to_string(spec.height) +
                                " after " + std::to_string(kMaxPlacementAttempts) + " attempts");
    DotAnnotation c{uniform(mx, W - mx), uniform(my, H - my)};
    if (!(c.x >= 0.0 && c.x < W && c.y >= 0.0 && c.y < H)) continue;
    bool ok = true;
    for (const auto& o : centers) {
      const double dx = c.x - o.x, dy = c.y - o.y;
      if (dx * dx + dy * dy < spec.min_separation * spec.min_separation) {
        ok = false;
        break;
      }
    }
    if (ok) centers.push_back(c);
  }

  const auto C = static_cast<std::size_t>(spec.channels);
  const auto h = static_cast<std::size_t>(spec.height), w = static_cast<std::size_t>(spec.width);
  std::vector<double> canvas(h * w);
  const double level = uniform(0.45, 0.75);
  switch (spec.background) {
    case Background::flat:
      std::fill(canvas.begin(), canvas.end(), level);
      break;
    case Background::gradient:
    case Background::speckle: {
      const double angle = uniform(0.0, 2.0 * std::numbers::pi);
      const double amp = uniform(0.05, 0.2);
      const double gx = std::cos(angle) * amp / W, gy = std::sin(angle) * amp / H;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          canvas[y * w + x] = level + gx * (static_cast<double>(x) - W / 2) +
                              gy * (static_cast<double>(y) - H / 2);
      if (spec.background == Background::speckle) {
        std::normal_distribution<double> noise(0.0, 0.03);
        for (double& v : canvas) v += noise(rng);
      }
      break;
    }
  }

  for (const auto& c : centers) {
    const double a = uniform(spec.radius_min, spec.radius_max);
    const double b = a * uniform(0.5, 0.9);
    const double theta = uniform(0.0, std::numbers::pi);
    const double contrast = uniform(0.3, 0.7);
    const double ct = std::cos(theta), st = std::sin(theta);
    const int x0 = std::max(0, static_cast<int>(std::floor(c.x - a - 2)));
    const int x1 = std::min(spec.width - 1, static_cast<int>(std::ceil(c.x + a + 2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c.y - a - 2)));
    const int y1 = std::min(spec.height - 1, static_cast<int>(std::ceil(c.y + a + 2)));
    for (int py = y0; py <= y1; ++py)
      for (int px = x0; px <= x1; ++px) {
        const double dx = px - c.x, dy = py - c.y;
        const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
        const double rho = std::sqrt(u * u + v * v);
        const double mask = detail::smoothstep((1.25 - rho) / 0.5);
        canvas[static_cast<std::size_t>(py) * w + static_cast<std::size_t>(px)] *=
            1.0 - contrast * mask;
      }
  }

  if (unit(rng) < spec.glare_probability) {
    const double gx = uniform(0.0, W), gy = uniform(0.0, H);
    const double ga = uniform(8.0, 24.0), gb = ga * uniform(0.3, 1.0);
    const double theta = uniform(0.0, std::numbers::pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - gx, dy = static_cast<double>(y) - gy;
        const double u = (dx * ct + dy * st) / ga, v = (-dx * st + dy * ct) / gb;
        canvas[y * w + x] += spec.glare_intensity * std::exp(-(u * u + v * v));
      }
  }

  Scene scene;
  scene.image = Tensor({C, h, w});
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) {
      const double v = std::clamp(canvas[i], 0.0, 1.0);
      scene.image[ch * h * w + i] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
    }
  char name[32];
  std::snprintf(name, sizeof(name), "images/scene_%05llu.png",
                static_cast<unsigned long long>(index));
  scene.truth = AnnotatedImage{name, spec.width, spec.height, std::move(centers)};
  return scene;
}

/// Writes `size` scenes as PNGs under out_dir/images and one dot CSV
/// (out_dir/annotations.csv) whose image paths are relative to out_dir.
inline std::vector<AnnotatedImage> generate_dataset(const SceneSpec& spec, std::size_t size,
                                                    const std::filesystem::path& out_dir,
                                                    std::uint64_t first_index = 0) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "images");
  std::vector<AnnotatedImage> truths;
  truths.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    Scene s = generate_scene(spec, first_index + i);
    write_png_file(png_from_tensor(s.image), (out_dir / s.truth.image_path).string());
    truths.push_back(std::move(s.truth));
  }
  std::ofstream csv(out_dir / "annotations.csv");
  if (!csv) throw IoError("cannot write " + (out_dir / "annotations.csv").string());
  write_dot_csv(csv, truths);
  return truths;
}

}  // namespace densecount
