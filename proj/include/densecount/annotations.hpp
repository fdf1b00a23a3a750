#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "densecount/density_map.hpp"
#include "densecount/error.hpp"
#include "densecount/io_util.hpp"

namespace densecount {

// Object center. x is the column, y the row; pixel centers sit on integers.
struct DotAnnotation {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const DotAnnotation&, const DotAnnotation&) = default;
};

struct BoxAnnotation {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
};

struct AnnotatedImage {
  std::string image_path;
  int width = 0;
  int height = 0;
  std::vector<DotAnnotation> dots;

  // Bounds are half-open: 0 <= x < width, 0 <= y < height.
  void validate() const {
    if (width <= 0 || height <= 0)
      throw ValidationError("image '" + image_path + "': non-positive dimensions");
    for (std::size_t i = 0; i < dots.size(); ++i) {
      const auto& d = dots[i];
      if (!(d.x >= 0.0 && d.x < width && d.y >= 0.0 && d.y < height))
        throw ValidationError("image '" + image_path + "': dot " + std::to_string(i) + " (" +
                              io::format_double(d.x) + ", " + io::format_double(d.y) +
                              ") outside " + std::to_string(width) + "x" +
                              std::to_string(height));
    }
  }

  friend bool operator==(const AnnotatedImage&, const AnnotatedImage&) = default;
};

inline constexpr std::string_view kDotCsvHeader = "image_path,width,height,x,y";

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace detail

/// Reads the dot CSV (`image_path,width,height,x,y`). Rows of one image are
/// grouped in order of first appearance; a row with empty x and y declares an
/// image without dots. Throws ParseError (with line number) on malformed rows
/// and ValidationError on out-of-bounds dots.
inline std::vector<AnnotatedImage> parse_dot_csv(std::istream& in) {
  std::vector<AnnotatedImage> images;
  std::unordered_map<std::string, std::size_t> index_of;
  std::string raw;
  std::size_t line_no = 0;
  bool header_seen = false;

  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line_no == 1 && line.size() >= 3 && line.substr(0, 3) == "\xEF\xBB\xBF")
      line.remove_prefix(3);
    if (!header_seen) {
      if (line != kDotCsvHeader)
        throw ParseError("line " + std::to_string(line_no) + ": expected header '" +
                         std::string(kDotCsvHeader) + "'");
      header_seen = true;
      continue;
    }
    if (io::trim(line).empty()) continue;

    auto fields = detail::split_fields(line, ',');
    auto fail = [&](const std::string& what) {
      return ParseError("line " + std::to_string(line_no) + ": " + what);
    };
    if (fields.size() != 5)
      throw fail("expected 5 columns, found " + std::to_string(fields.size()));
    std::string path(io::trim(fields[0]));
    if (path.empty()) throw fail("empty image_path");
    auto w = io::parse_number<int>(io::trim(fields[1]));
    auto h = io::parse_number<int>(io::trim(fields[2]));
    if (!w || !h) throw fail("width/height must be integers");
    if (*w <= 0 || *h <= 0) throw fail("width/height must be positive");

    auto xs = io::trim(fields[3]);
    auto ys = io::trim(fields[4]);
    std::optional<DotAnnotation> dot;
    if (xs.empty() != ys.empty()) throw fail("x and y must both be present or both empty");
    if (!xs.empty()) {
      auto x = io::parse_number<double>(xs);
      auto y = io::parse_number<double>(ys);
      if (!x || !y || !std::isfinite(*x) || !std::isfinite(*y))
        throw fail("non-numeric coordinate");
      dot = DotAnnotation{*x, *y};
    }

    auto [it, inserted] = index_of.try_emplace(path, images.size());
    if (inserted) {
      images.push_back(AnnotatedImage{path, *w, *h, {}});
    } else {
      const auto& img = images[it->second];
      if (img.width != *w || img.height != *h)
        throw fail("dimensions of '" + path + "' disagree with an earlier row");
    }
    if (dot) images[it->second].dots.push_back(*dot);
  }
  if (!header_seen) throw ParseError("line 1: missing header");

  for (const auto& img : images) img.validate();
  return images;
}

/// Writes the dot CSV; parse_dot_csv reads it back to an identical list.
inline void write_dot_csv(std::ostream& out, std::span<const AnnotatedImage> images) {
  out << kDotCsvHeader << '\n';
  for (const auto& img : images) {
    const std::string prefix =
        img.image_path + "," + std::to_string(img.width) + "," + std::to_string(img.height) + ",";
    if (img.dots.empty()) {
      out << prefix << ",\n";
      continue;
    }
    for (const auto& d : img.dots)
      out << prefix << io::format_double(d.x) << ',' << io::format_double(d.y) << '\n';
  }
}

inline DotAnnotation box_to_dot(const BoxAnnotation& b) {
  if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max))
    throw ValidationError("degenerate box (" + io::format_double(b.x_min) + ", " +
                          io::format_double(b.y_min) + ", " + io::format_double(b.x_max) +
                          ", " + io::format_double(b.y_max) + ")");
  return {(b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0};
}

/// Reads box JSON-lines (one image per line) and reduces each box to its center.
inline std::vector<AnnotatedImage> parse_box_jsonl(std::istream& in) {
  std::vector<AnnotatedImage> images;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (io::trim(raw).empty()) continue;
    auto fail = [&](const std::string& what) {
      return ParseError("line " + std::to_string(line_no) + ": " + what);
    };
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("invalid JSON: ") + e.what());
    }
    try {
      AnnotatedImage img;
      img.image_path = obj.at("image_path").get<std::string>();
      img.width = obj.at("width").get<int>();
      img.height = obj.at("height").get<int>();
      std::size_t box_index = 0;
      for (const auto& box : obj.at("boxes")) {
        if (!box.is_array() || box.size() != 4) throw fail("box must have 4 coordinates");
        BoxAnnotation b{box[0].get<double>(), box[1].get<double>(), box[2].get<double>(),
                        box[3].get<double>()};
        try {
          img.dots.push_back(box_to_dot(b));
        } catch (const ValidationError& e) {
          throw ValidationError("image '" + img.image_path + "' box " +
                                std::to_string(box_index) + ": " + e.what());
        }
        ++box_index;
      }
      img.validate();
      images.push_back(std::move(img));
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("bad field: ") + e.what());
    }
  }
  return images;
}

/// Indicator image: +1 at the nearest pixel center of every dot (round half
/// up per axis). Coincident dots accumulate.
inline DensityMap dots_to_raster(std::span<const DotAnnotation> dots, int width, int height) {
  DensityMap out(width, height);
  for (const auto& d : dots) {
    if (!(d.x >= 0.0 && d.x < width && d.y >= 0.0 && d.y < height))
      throw UsageError("dots_to_raster: dot out of bounds");
    // x just below width can round to width; keep it on the last column.
    int col = std::min(static_cast<int>(std::floor(d.x + 0.5)), width - 1);
    int row = std::min(static_cast<int>(std::floor(d.y + 0.5)), height - 1);
    out.at(col, row) += 1.0f;
  }
  return out;
}

}  // namespace densecount
