#pragma once

// ".ten" tensor files:
//   bytes 0..3  "TEN1"
//   byte  4     dtype code (1 = f32, 2 = f64)
//   byte  5     ndim
//   then ndim little-endian u32 extents, then the row-major payload in
//   little-endian IEEE-754.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mmnet/tensor.hpp"

namespace mmnet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

namespace detail {

template <class U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

template <class U>
void put(std::vector<std::uint8_t>& buf, U v) {
  v = to_little(v);
  std::uint8_t raw[sizeof(U)];
  std::memcpy(raw, &v, sizeof(U));
  buf.insert(buf.end(), raw, raw + sizeof(U));
}

template <class U>
U get(const std::vector<std::uint8_t>& buf, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(U) > buf.size()) throw FormatError(what + ": truncated file");
  U v;
  std::memcpy(&v, buf.data() + pos, sizeof(U));
  pos += sizeof(U);
  return to_little(v);
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "only f32/f64 tensors are serializable");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <class T>
std::vector<std::uint8_t> encode_ten(const Shape& shape, std::span<const T> values) {
  if (shape.size() > 255) throw FormatError("encode_ten: rank above 255");
  std::vector<std::uint8_t> buf{'T', 'E', 'N', '1', static_cast<std::uint8_t>(dtype_of<T>()),
                                static_cast<std::uint8_t>(shape.size())};
  for (auto e : shape) {
    if (e > 0xFFFFFFFFull) throw FormatError("encode_ten: extent does not fit in u32");
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(e));
  }
  buf.reserve(buf.size() + values.size() * sizeof(T));
  for (T v : values) {
    if constexpr (std::is_same_v<T, float>) {
      detail::put<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
    } else {
      detail::put<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(v));
    }
  }
  return buf;
}

/// Decodes into T, converting from the stored dtype when it differs.
template <class T>
Tensor<T> decode_ten(const std::vector<std::uint8_t>& buf, const std::string& what = "ten") {
  std::size_t pos = 0;
  if (buf.size() < 6 || std::memcmp(buf.data(), "TEN1", 4) != 0) throw FormatError(what + ": bad magic");
  pos = 4;
  const auto code = detail::get<std::uint8_t>(buf, pos, what);
  if (code != 1 && code != 2) throw FormatError(what + ": unknown dtype code " + std::to_string(code));
  const auto rank = detail::get<std::uint8_t>(buf, pos, what);
  Shape shape(rank);
  for (auto& e : shape) {
    e = detail::get<std::uint32_t>(buf, pos, what);
    if (e == 0) throw FormatError(what + ": zero extent");
  }
  const std::size_t count = numel(shape);
  const std::size_t width = code == 1 ? 4 : 8;
  if (buf.size() - pos != count * width) {
    throw FormatError(what + ": payload has " + std::to_string(buf.size() - pos) + " bytes, expected " +
                      std::to_string(count * width));
  }
  std::vector<T> values(count);
  for (auto& v : values) {
    if (code == 1) {
      v = static_cast<T>(std::bit_cast<float>(detail::get<std::uint32_t>(buf, pos, what)));
    } else {
      v = static_cast<T>(std::bit_cast<double>(detail::get<std::uint64_t>(buf, pos, what)));
    }
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <class T>
void save_ten(const Tensor<T>& t, const std::filesystem::path& path) {
  detail::write_bytes(path, encode_ten<T>(t.shape(), t.data()));
}

template <class T>
Tensor<T> load_ten(const std::filesystem::path& path) {
  return decode_ten<T>(detail::read_bytes(path), path.string());
}

}  // namespace mmnet
