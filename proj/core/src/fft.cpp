#include "caac/fft.hpp"

#include <cmath>
#include <stdexcept>

namespace caac {

bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

void fft_1d(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (!is_power_of_two(n)) {
    throw std::invalid_argument("fft_1d: length must be a power of two");
  }
  // bit reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& x : a) x *= inv;
  }
}

void fft_2d(std::vector<std::complex<double>>& a, std::size_t h,
            std::size_t w, bool inverse) {
  if (a.size() != h * w) {
    throw std::invalid_argument("fft_2d: buffer size mismatch");
  }
  std::vector<std::complex<double>> line;
  line.resize(w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) line[c] = a[r * w + c];
    fft_1d(line, inverse);
    for (std::size_t c = 0; c < w; ++c) a[r * w + c] = line[c];
  }
  line.resize(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) line[r] = a[r * w + c];
    fft_1d(line, inverse);
    for (std::size_t r = 0; r < h; ++r) a[r * w + c] = line[r];
  }
}

}  // namespace caac
