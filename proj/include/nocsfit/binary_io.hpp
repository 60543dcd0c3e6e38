#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "nocsfit/error.hpp"

// Little-endian scalar encoding shared by the weight and dataset containers.
namespace nf::binio {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.write(bytes, sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) throw Error(ErrorCode::FormatError, std::string("truncated while reading ") + what);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void put_bytes(std::ostream& out, const std::string& s) { out.write(s.data(), static_cast<std::streamsize>(s.size())); }

inline std::string get_bytes(std::istream& in, std::size_t n, const char* what) {
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw Error(ErrorCode::FormatError, std::string("truncated while reading ") + what);
  }
  return s;
}

// FNV-1a, 64-bit.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace nf::binio
