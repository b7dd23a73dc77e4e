#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace mtil {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

/// Malformed, truncated or incompatible file content.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& os, uint32_t v) { write_bytes(os, &v, 4); }
inline void write_u64(std::ostream& os, uint64_t v) { write_bytes(os, &v, 8); }
inline void write_f64(std::ostream& os, double v) { write_bytes(os, &v, 8); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  write_bytes(os, s.data(), s.size());
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw FormatError(std::string("truncated file while reading ") + what);
}

inline uint32_t read_u32(std::istream& is, const char* what) {
  uint32_t v;
  read_bytes(is, &v, 4, what);
  return v;
}

inline uint64_t read_u64(std::istream& is, const char* what) {
  uint64_t v;
  read_bytes(is, &v, 8, what);
  return v;
}

inline double read_f64(std::istream& is, const char* what) {
  double v;
  read_bytes(is, &v, 8, what);
  return v;
}

inline std::string read_string(std::istream& is, const char* what, uint64_t max_len = 1 << 20) {
  uint64_t n = read_u64(is, what);
  if (n > max_len) throw FormatError(std::string("implausible string length for ") + what);
  std::string s(n, '\0');
  read_bytes(is, s.data(), n, what);
  return s;
}

}  // namespace mtil
