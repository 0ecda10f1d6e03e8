#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian primitives shared by the map, sample and checkpoint containers.
namespace futcr::io {

inline void put_bytes_le(std::ostream& os, std::uint64_t v, int n) {
  char b[8];
  for (int i = 0; i < n; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, n);
}

inline std::uint64_t get_bytes_le(std::istream& is, int n) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), n);
  if (!is) throw std::runtime_error("unexpected end of binary stream");
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_bytes_le(os, v, 1); }
inline void put_u32(std::ostream& os, std::uint32_t v) { put_bytes_le(os, v, 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_bytes_le(os, v, 8); }
inline void put_i32(std::ostream& os, std::int32_t v) { put_bytes_le(os, static_cast<std::uint32_t>(v), 4); }
inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(os, bits);
}
inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void put_f64s(std::ostream& os, std::span<const double> v) {
  put_u64(os, v.size());
  for (double x : v) put_f64(os, x);
}

inline std::uint8_t get_u8(std::istream& is) { return static_cast<std::uint8_t>(get_bytes_le(is, 1)); }
inline std::uint32_t get_u32(std::istream& is) { return static_cast<std::uint32_t>(get_bytes_le(is, 4)); }
inline std::uint64_t get_u64(std::istream& is) { return get_bytes_le(is, 8); }
inline std::int32_t get_i32(std::istream& is) { return static_cast<std::int32_t>(get_u32(is)); }
inline double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}
inline std::string get_string(std::istream& is) {
  const auto n = get_u32(is);
  if (n > (1u << 24)) throw std::runtime_error("string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("unexpected end of binary stream");
  return s;
}
inline std::vector<double> get_f64s(std::istream& is) {
  const auto n = get_u64(is);
  if (n > (1ull << 32)) throw std::runtime_error("array length out of range");
  std::vector<double> v(n);
  for (auto& x : v) x = get_f64(is);
  return v;
}

}  // namespace futcr::io
