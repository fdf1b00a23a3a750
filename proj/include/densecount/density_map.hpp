#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "densecount/error.hpp"

namespace densecount {

// Non-negative per-pixel density, row-major. Its integral is an object count.
struct DensityMap {
  int width = 0;
  int height = 0;
  std::vector<float> values;

  DensityMap() = default;
  DensityMap(int w, int h) : width(w), height(h) {
    if (w < 0 || h < 0) throw UsageError("DensityMap: negative dimensions");
    values.assign(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0.0f);
  }

  float& at(int x, int y) {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  float at(int x, int y) const {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }

  std::size_t size() const { return values.size(); }

  // Throws ValidationError unless every value is finite and >= 0.
  void validate() const {
    if (values.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
      throw ValidationError("DensityMap: value count does not match dimensions");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i]) || values[i] < 0.0f)
        throw ValidationError("DensityMap: value at index " + std::to_string(i) +
                              " is negative or not finite");
    }
  }

  friend bool operator==(const DensityMap&, const DensityMap&) = default;
};

}  // namespace densecount
