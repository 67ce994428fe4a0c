#include "vqmir/binary_io.hpp"

#include <bit>
#include <istream>
#include <ostream>

#include "vqmir/error.hpp"

namespace vqmir::binio {
namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void put_u16(std::ostream& os, std::uint16_t v) { put_le(os, v); }
void put_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void put_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
void put_f32(std::ostream& os, float v) { put_le(os, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }
void put_bytes(std::ostream& os, const std::string& bytes) { os.write(bytes.data(), static_cast<std::streamsize>(bytes.size())); }
void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  put_bytes(os, s);
}

std::uint16_t get_u16(std::istream& is) { return get_le<std::uint16_t>(is); }
std::uint32_t get_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t get_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
float get_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }
double get_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

std::string get_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  if (n != 0 && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("unexpected end of file");
  return s;
}

std::string get_string(std::istream& is, std::size_t max_len) {
  const std::uint32_t n = get_u32(is);
  if (n > max_len) throw FormatError("string field of " + std::to_string(n) + " bytes exceeds limit");
  return get_bytes(is, n);
}

}  // namespace vqmir::binio
