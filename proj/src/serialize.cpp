#include "bayeseg/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace bayeseg {

namespace {

constexpr char kMagic[5] = {'B', 'S', 'T', 'E', 'N'};

template <typename U>
void write_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf.data(), buf.size());
}

template <typename U>
U read_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size()))
    throw FormatError("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v); }
void write_u16(std::ostream& os, std::uint16_t v) { write_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }
std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
std::uint16_t read_u16(std::istream& is) { return read_le<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

template <typename T>
void write_tensor(std::ostream& os, const Array<T>& a) {
  if (a.dims.size() > std::numeric_limits<std::uint8_t>::max())
    throw FormatError("tensor rank too large to serialize");
  os.write(kMagic, sizeof(kMagic));
  write_u16(os, kTensorFormatVersion);
  write_u8(os, static_cast<std::uint8_t>(a.dims.size()));
  for (auto d : a.dims) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw FormatError("tensor extent too large");
    write_u32(os, static_cast<std::uint32_t>(d));
  }
  for (T v : a.data) write_f64(os, static_cast<double>(v));
  if (!os) throw IoError("tensor write failed");
}

template <typename T>
Array<T> read_tensor(std::istream& is) {
  char magic[5];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError("bad tensor magic");
  auto version = read_u16(is);
  if (version != kTensorFormatVersion)
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  auto rank = read_u8(is);
  Dims dims(rank);
  for (auto& d : dims) d = read_u32(is);
  Array<T> a(dims);
  for (auto& v : a.data) v = static_cast<T>(read_f64(is));
  return a;
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Array<T>& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, a);
  if (!os) throw IoError("write failed: " + path.string());
}

template <typename T>
Array<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_tensor<T>(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template void write_tensor(std::ostream&, const Array<float>&);
template void write_tensor(std::ostream&, const Array<double>&);
template Array<float> read_tensor(std::istream&);
template Array<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Array<float>&);
template void save_tensor(const std::filesystem::path&, const Array<double>&);
template Array<float> load_tensor(const std::filesystem::path&);
template Array<double> load_tensor(const std::filesystem::path&);

}  // namespace bayeseg
