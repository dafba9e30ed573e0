#include "bayeseg/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "bayeseg/errors.hpp"

namespace bayeseg {

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  if (img.pixels.size() != img.height * img.width)
    throw ShapeError("pgm pixel count does not match " + std::to_string(img.height) + "x" +
                     std::to_string(img.width));
  if (img.maxval == 0 || img.maxval > 255) throw FormatError("pgm maxval must be in 1..255");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  if (header_token(is) != "P5") throw FormatError(path.string() + ": not a binary PGM");
  GrayImage img;
  try {
    img.width = std::stoul(header_token(is));
    img.height = std::stoul(header_token(is));
    img.maxval = static_cast<unsigned>(std::stoul(header_token(is)));
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PGM header");
  }
  if (img.maxval == 0 || img.maxval > 255)
    throw FormatError(path.string() + ": only 8-bit PGM is supported");
  img.pixels.resize(img.width * img.height);
  is.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw FormatError(path.string() + ": truncated PGM data");
  return img;
}

GrayImage to_gray8(const double* values, std::size_t height, std::size_t width, bool log_scale) {
  GrayImage img;
  img.height = height;
  img.width = width;
  std::size_t n = height * width;
  std::vector<double> v(values, values + n);
  if (log_scale)
    for (auto& x : v) {
      if (!(x > 0)) throw DomainError("log-scaled image needs positive values", &x - v.data());
      x = std::log(x);
    }
  img.pixels.assign(n, 0);
  if (n == 0) return img;
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  double a = *lo, b = *hi;
  if (b > a)
    for (std::size_t i = 0; i < n; ++i)
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (v[i] - a) / (b - a)));
  return img;
}

}  // namespace bayeseg
