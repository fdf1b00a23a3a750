#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "densecount/png.hpp"
#include "densecount/tensor.hpp"

namespace densecount {

// PNG -> [C,H,W] tensor with values in [0, 1].
inline Tensor tensor_from_png(const PngImage& img) {
  const auto c = static_cast<std::size_t>(img.channels);
  const auto h = static_cast<std::size_t>(img.height);
  const auto w = static_cast<std::size_t>(img.width);
  Tensor t({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        t[(ch * h + y) * w + x] = static_cast<float>(img.pixels[(y * w + x) * c + ch]) / 255.0f;
  return t;
}

// [C,H,W] tensor in [0, 1] -> 8-bit PNG raster (values clamped, rounded).
inline PngImage png_from_tensor(const Tensor& t) {
  if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3))
    throw UsageError("png_from_tensor: expected [1|3,H,W], got " + shape_str(t.shape()));
  PngImage img;
  img.channels = static_cast<int>(t.dim(0));
  img.height = static_cast<int>(t.dim(1));
  img.width = static_cast<int>(t.dim(2));
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  img.pixels.resize(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(static_cast<double>(t[(ch * h + y) * w + x]), 0.0, 1.0);
        img.pixels[(y * w + x) * c + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

inline Tensor load_image(const std::string& path) { return tensor_from_png(read_png_file(path)); }

}  // namespace densecount
