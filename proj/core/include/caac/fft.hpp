#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace caac {

/// In-place iterative radix-2 FFT; n must be a power of two.
/// inverse = true applies the 1/n normalization.
void fft_1d(std::vector<std::complex<double>>& a, bool inverse);

/// 2-D FFT over a row-major h*w buffer (rows then columns); h, w powers
/// of two.
void fft_2d(std::vector<std::complex<double>>& a, std::size_t h,
            std::size_t w, bool inverse);

bool is_power_of_two(std::size_t n);

}  // namespace caac
