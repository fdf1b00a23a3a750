#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <ostream>
#include <string>
#include <vector>

#include <png.h>

#include "densecount/density_map.hpp"
#include "densecount/error.hpp"

namespace densecount {

// 8-bit raster, channels interleaved, 1 (gray) or 3 (RGB) channels.
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
};

inline std::vector<std::uint8_t> encode_png(const PngImage& img) {
  if (img.channels != 1 && img.channels != 3)
    throw UsageError("encode_png: channels must be 1 or 3");
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw UsageError("encode_png: pixel buffer size mismatch");
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(img.width);
  desc.height = static_cast<png_uint_32>(img.height);
  desc.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&desc, nullptr, &size, 0, img.pixels.data(), 0, nullptr))
    throw IoError(std::string("png encode failed: ") + desc.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&desc, out.data(), &size, 0, img.pixels.data(), 0, nullptr))
    throw IoError(std::string("png encode failed: ") + desc.message);
  out.resize(size);
  return out;
}

inline PngImage decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&desc, bytes.data(), bytes.size()))
    throw FormatError(std::string("png decode failed: ") + desc.message);
  PngImage img;
  img.width = static_cast<int>(desc.width);
  img.height = static_cast<int>(desc.height);
  img.channels = (desc.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  desc.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  img.pixels.resize(PNG_IMAGE_SIZE(desc));
  if (!png_image_finish_read(&desc, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&desc);
    throw FormatError(std::string("png decode failed: ") + desc.message);
  }
  return img;
}

inline void write_png_file(const PngImage& img, const std::string& path) {
  auto bytes = encode_png(img);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: '" + path + "'");
}

inline PngImage read_png_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const FormatError& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

/// Grayscale rendering of a density map: [0, max] maps linearly to [0, 255].
/// An all-zero map renders black.
inline PngImage heatmap_image(const DensityMap& dm) {
  dm.validate();
  PngImage img;
  img.width = dm.width;
  img.height = dm.height;
  img.channels = 1;
  img.pixels.assign(dm.values.size(), 0);
  float peak = 0.0f;
  for (float v : dm.values) peak = std::max(peak, v);
  if (peak <= 0.0f) return img;
  for (std::size_t i = 0; i < dm.values.size(); ++i) {
    const double t = static_cast<double>(dm.values[i]) / static_cast<double>(peak);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(t * 255.0));
  }
  return img;
}

inline void render_heatmap(const DensityMap& dm, std::ostream& os) {
  auto bytes = encode_png(heatmap_image(dm));
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("heatmap write failed");
}

inline void render_heatmap_file(const DensityMap& dm, const std::string& path) {
  write_png_file(heatmap_image(dm), path);
}

}  // namespace densecount
