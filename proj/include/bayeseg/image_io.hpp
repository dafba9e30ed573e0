#pragma once

// 8-bit binary PGM ("P5") for label maps and posterior visualisations.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace bayeseg {

struct GrayImage {
  std::size_t height = 0, width = 0;
  unsigned maxval = 255;
  std::vector<std::uint8_t> pixels;  // row-major
};

void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

// Min-max scaling to 0..255. With log_scale the field is mapped through ln
// first (values must be positive); a constant field maps to 0.
GrayImage to_gray8(const double* values, std::size_t height, std::size_t width,
                   bool log_scale = false);

}  // namespace bayeseg
