#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>

#include "densecount/error.hpp"

namespace densecount::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> buf;
  std::memcpy(buf.data(), &v, 4);
  os.write(buf.data(), 4);
}

inline void write_f32(std::ostream& os, float v) {
  std::array<char, 4> buf;
  std::memcpy(buf.data(), &v, 4);
  os.write(buf.data(), 4);
}

inline void write_bytes(std::ostream& os, std::string_view s) {
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// Returns false when the stream ends before n bytes were read.
inline bool read_exact(std::istream& is, char* dst, std::size_t n) {
  is.read(dst, static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(is.gcount()) == n;
}

inline std::optional<std::uint8_t> read_u8(std::istream& is) {
  char c;
  if (!read_exact(is, &c, 1)) return std::nullopt;
  return static_cast<std::uint8_t>(c);
}

inline std::optional<std::uint32_t> read_u32(std::istream& is) {
  std::array<char, 4> buf;
  if (!read_exact(is, buf.data(), 4)) return std::nullopt;
  std::uint32_t v;
  std::memcpy(&v, buf.data(), 4);
  return v;
}

inline bool at_eof(std::istream& is) {
  return is.peek() == std::char_traits<char>::eof();
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf;
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

// Whole-field numeric parse; rejects trailing garbage and empty input.
template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T value{};
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

// 64-bit FNV-1a, used for config fingerprints.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

}  // namespace densecount::io
