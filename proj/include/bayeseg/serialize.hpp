#pragma once

// Binary tensor format:
//   "BSTEN" | version u16 | rank u8 | dims u32[rank] | values f64[numel]
// All integers and values little-endian. Values are always stored as IEEE-754
// binary64, so float data round-trips exactly.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "bayeseg/tensor.hpp"

namespace bayeseg {

inline constexpr std::uint16_t kTensorFormatVersion = 1;

template <typename T>
void write_tensor(std::ostream& os, const Array<T>& a);
template <typename T>
Array<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Array<T>& a);
template <typename T>
Array<T> load_tensor(const std::filesystem::path& path);

// Little-endian primitives shared by the checkpoint and label writers.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);

}  // namespace bayeseg
