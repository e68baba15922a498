#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdtrack {

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename A, typename... Rest>
void msg_append(std::ostringstream& oss, A&& a, Rest&&... rest) {
  oss << std::forward<A>(a);
  msg_append(oss, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Parts>
std::string strcat_msg(Parts&&... parts) {
  std::ostringstream oss;
  detail::msg_append(oss, std::forward<Parts>(parts)...);
  return oss.str();
}

template <typename... Parts>
[[noreturn]] void bail(Parts&&... parts) {
  throw std::runtime_error(strcat_msg(std::forward<Parts>(parts)...));
}

template <typename... Parts>
void require(bool cond, Parts&&... parts) {
  if (!cond) bail(std::forward<Parts>(parts)...);
}

// ---------------------------------------------------------------------------
// Binary I/O helpers. File formats in this project are little-endian; the
// helpers below assume a little-endian host (asserted once at startup of the
// readers/writers that care).

inline bool host_is_little_endian() {
  const std::uint32_t probe = 1;
  return *reinterpret_cast<const unsigned char*>(&probe) == 1;
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<std::size_t>(is.gcount()) == sizeof(T);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open file: ", path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// FNV-1a, used for the CLI reproducibility banner.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace sdtrack
