#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

// Little-endian primitives shared by the cache and checkpoint formats.
namespace vqmir::binio {

void put_u16(std::ostream& os, std::uint16_t v);
void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
void put_f32(std::ostream& os, float v);
void put_f64(std::ostream& os, double v);
void put_bytes(std::ostream& os, const std::string& bytes);
// u32 length followed by the raw bytes.
void put_string(std::ostream& os, const std::string& s);

// Each reader throws FormatError when the stream ends early.
std::uint16_t get_u16(std::istream& is);
std::uint32_t get_u32(std::istream& is);
std::uint64_t get_u64(std::istream& is);
float get_f32(std::istream& is);
double get_f64(std::istream& is);
std::string get_bytes(std::istream& is, std::size_t n);
std::string get_string(std::istream& is, std::size_t max_len = 1u << 26);

}  // namespace vqmir::binio
