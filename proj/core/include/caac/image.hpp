#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace caac {

/// Binary PGM (P5, maxval 255): "P5\n<w> <h>\n255\n" then h*w bytes,
/// row-major, top row first. Values mapped linearly from [lo, hi] and
/// clamped.
void write_pgm(const std::filesystem::path& path,
               const std::vector<double>& values, std::size_t height,
               std::size_t width, double lo, double hi);

/// Binary PPM (P6, maxval 255) with a blue-white-red diverging map over
/// [-scale, +scale]; layout "P6\n<w> <h>\n255\n" then h*w RGB triples.
void write_ppm_diverging(const std::filesystem::path& path,
                         const std::vector<double>& values,
                         std::size_t height, std::size_t width, double scale);

}  // namespace caac
