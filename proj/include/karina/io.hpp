#pragma once

// Little-endian binary helpers shared by the checkpoint and grid file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace karina {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, static_cast<std::uint32_t>(v)); }

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void put_bytes(std::ostream& os, const std::string& s) {
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void put_f32_array(std::ostream& os, const float* v, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_f32(os, v[i]);
  }
}

/// Reader that reports what it was reading when the stream runs dry.
class Reader {
 public:
  Reader(std::istream& is, std::string source) : is_(is), source_(std::move(source)) {}

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    if (n) read(s.data(), n, what);
    return s;
  }

  void read(void* dst, std::size_t n, const char* what) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(is_.gcount());
    offset_ += got;
    if (got != n)
      throw FormatError(source_ + ": truncated while reading " + what + " at byte " +
                        std::to_string(offset_) + " (needed " + std::to_string(n) + ", got " +
                        std::to_string(got) + ")");
  }

  void f32_array(float* dst, std::size_t n, const char* what) {
    read(dst, n * 4, what);
    if constexpr (std::endian::native != std::endian::little) {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u;
        std::memcpy(&u, dst + i, 4);
        u = ((u & 0xffu) << 24) | ((u & 0xff00u) << 8) | ((u >> 8) & 0xff00u) | (u >> 24);
        std::memcpy(dst + i, &u, 4);
      }
    }
  }

  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
  std::size_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::string source_;
  std::size_t offset_ = 0;
};

}  // namespace io
}  // namespace karina
