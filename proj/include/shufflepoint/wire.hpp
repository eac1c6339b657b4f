#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "shufflepoint/errors.hpp"

// Explicit little-endian encoding for the binary file formats, independent of
// host byte order.
namespace spn::wire {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u8(std::ostream& out, std::uint8_t v) { put_bytes(out, &v, 1); }

inline void put_u32(std::ostream& out, std::uint32_t v) {
  std::uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  put_bytes(out, b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  put_bytes(out, b, 8);
}

inline void put_i64(std::ostream& out, std::int64_t v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void get_bytes(std::istream& in, void* p, std::size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw IoError(std::string("truncated file while reading ") + what);
}

inline std::uint8_t get_u8(std::istream& in, const char* what) {
  std::uint8_t v;
  get_bytes(in, &v, 1, what);
  return v;
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  std::uint8_t b[4];
  get_bytes(in, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& in, const char* what) {
  std::uint8_t b[8];
  get_bytes(in, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::int64_t get_i64(std::istream& in, const char* what) {
  return std::bit_cast<std::int64_t>(get_u64(in, what));
}

inline double get_f64(std::istream& in, const char* what) {
  return std::bit_cast<double>(get_u64(in, what));
}

}  // namespace spn::wire
