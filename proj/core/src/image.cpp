#include "caac/image.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace caac {

namespace {

std::uint8_t to_byte(double v, double lo, double hi) {
  if (hi <= lo) return 0;
  const double f = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
  return static_cast<std::uint8_t>(f * 255.0 + 0.5);
}

std::ofstream open_binary(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw std::runtime_error("cannot open image for writing: " +
                             path.string());
  }
  return os;
}

}  // namespace

void write_pgm(const std::filesystem::path& path,
               const std::vector<double>& values, std::size_t height,
               std::size_t width, double lo, double hi) {
  if (values.size() != height * width) {
    throw std::runtime_error("write_pgm: value count does not match size");
  }
  auto os = open_binary(path);
  os << "P5\n" << width << ' ' << height << "\n255\n";
  std::vector<std::uint8_t> row(width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      row[c] = to_byte(values[r * width + c], lo, hi);
    }
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size()));
  }
}

void write_ppm_diverging(const std::filesystem::path& path,
                         const std::vector<double>& values,
                         std::size_t height, std::size_t width,
                         double scale) {
  if (values.size() != height * width) {
    throw std::runtime_error("write_ppm: value count does not match size");
  }
  auto os = open_binary(path);
  os << "P6\n" << width << ' ' << height << "\n255\n";
  std::vector<std::uint8_t> row(width * 3);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      double f = scale > 0.0
                     ? std::clamp(values[r * width + c] / scale, -1.0, 1.0)
                     : 0.0;
      // -1 -> blue, 0 -> white, +1 -> red
      const double mag = std::abs(f);
      const std::uint8_t fade =
          static_cast<std::uint8_t>((1.0 - mag) * 255.0 + 0.5);
      if (f >= 0.0) {
        row[c * 3 + 0] = 255;
        row[c * 3 + 1] = fade;
        row[c * 3 + 2] = fade;
      } else {
        row[c * 3 + 0] = fade;
        row[c * 3 + 1] = fade;
        row[c * 3 + 2] = 255;
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size()));
  }
}

}  // namespace caac
