#pragma once

// Little-endian primitives shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "ibn/errors.hpp"

namespace ibn::binio {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

// Bulk float writer; converts through a byte buffer so big-endian hosts work.
inline void put_f32s(std::ostream& os, const float* p, std::size_t n) {
  std::vector<char> buf(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = std::bit_cast<std::uint32_t>(p[i]);
    for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<char>((u >> (8 * k)) & 0xff);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  void bytes(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw IoError(what_ + ": unexpected end of file");
  }
  std::uint8_t u8() {
    unsigned char b;
    bytes(&b, 1);
    return b;
  }
  std::uint16_t u16() {
    unsigned char b[2];
    bytes(b, 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  void f32s(float* dst, std::size_t n) {
    std::vector<unsigned char> buf(n * 4);
    bytes(buf.data(), buf.size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t u = static_cast<std::uint32_t>(buf[i * 4]) | (static_cast<std::uint32_t>(buf[i * 4 + 1]) << 8) |
                              (static_cast<std::uint32_t>(buf[i * 4 + 2]) << 16) |
                              (static_cast<std::uint32_t>(buf[i * 4 + 3]) << 24);
      dst[i] = std::bit_cast<float>(u);
    }
  }
  // True when the stream has no bytes left.
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
  std::string what_;
};

}  // namespace ibn::binio
