#pragma once

// Raw little-endian binaries: weights and inputs as 32-bit floats in
// row-major order, labels as 32-bit unsigned integers.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "mpq/error.hpp"

namespace mpq::io {

namespace detail {

template <class T>
std::vector<T> read_raw(const std::filesystem::path& path, std::size_t count) {
  static_assert(sizeof(T) == 4);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<T> out(count);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(T)) {
    throw IoError("'" + path.string() + "' holds fewer than " + std::to_string(count) + " values");
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : out) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = __builtin_bswap32(u);
      std::memcpy(&v, &u, 4);
    }
  }
  return out;
}

template <class T>
void write_raw(const std::filesystem::path& path, std::span<const T> values) {
  static_assert(sizeof(T) == 4);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  if constexpr (std::endian::native == std::endian::big) {
    for (T v : values) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = __builtin_bswap32(u);
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
  } else {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace detail

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t count) {
  return detail::read_raw<float>(path, count);
}
inline std::vector<std::uint32_t> read_u32(const std::filesystem::path& path, std::size_t count) {
  return detail::read_raw<std::uint32_t>(path, count);
}
inline void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  detail::write_raw<float>(path, values);
}
inline void write_u32(const std::filesystem::path& path, std::span<const std::uint32_t> values) {
  detail::write_raw<std::uint32_t>(path, values);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace mpq::io
