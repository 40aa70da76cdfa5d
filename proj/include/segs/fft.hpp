#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace segs {

using Complex = std::complex<double>;

namespace detail {

inline bool is_pow2(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place 1D transform of `n` samples spaced `stride` apart. Radix-2 for
// powers of two, direct summation otherwise. sign = -1 forward, +1 inverse
// (unscaled), encoded in the twiddle table.
// twiddle[j] = exp(sign * 2 pi i j / n), j < n.
inline std::vector<Complex> twiddles(std::size_t n, int sign) {
  std::vector<Complex> w(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    w[j] = Complex(std::cos(ang), std::sin(ang));
  }
  return w;
}

inline void dft1d(Complex* data, std::size_t n, std::size_t stride, const std::vector<Complex>& tw,
                  std::vector<Complex>& scratch) {
  scratch.resize(n);
  for (std::size_t i = 0; i < n; ++i) scratch[i] = data[i * stride];
  if (is_pow2(n)) {
    for (std::size_t i = 1, j = 0; i < n; ++i) {
      std::size_t bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(scratch[i], scratch[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t step = n / len;
      for (std::size_t i = 0; i < n; i += len) {
        for (std::size_t j = 0; j < len / 2; ++j) {
          const Complex w = tw[j * step];
          const Complex u = scratch[i + j];
          const Complex v = scratch[i + j + len / 2] * w;
          scratch[i + j] = u + v;
          scratch[i + j + len / 2] = u - v;
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) data[i * stride] = scratch[i];
    return;
  }
  for (std::size_t k = 0; k < n; ++k) {
    Complex acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) acc += scratch[t] * tw[(k * t) % n];
    data[k * stride] = acc;
  }
}

}  // namespace detail

/// 2D DFT of a row-major height x width array. The inverse includes 1/(HW).
inline std::vector<Complex> dft2d(std::vector<Complex> data, int width, int height, bool inverse = false) {
  const int sign = inverse ? 1 : -1;
  std::vector<Complex> scratch;
  const auto tw_row = detail::twiddles(static_cast<std::size_t>(width), sign);
  const auto tw_col = detail::twiddles(static_cast<std::size_t>(height), sign);
  for (int y = 0; y < height; ++y)
    detail::dft1d(data.data() + static_cast<std::size_t>(y) * width, static_cast<std::size_t>(width), 1, tw_row,
                  scratch);
  for (int x = 0; x < width; ++x)
    detail::dft1d(data.data() + x, static_cast<std::size_t>(height), static_cast<std::size_t>(width), tw_col,
                  scratch);
  if (inverse) {
    const double s = 1.0 / (static_cast<double>(width) * height);
    for (auto& v : data) v *= s;
  }
  return data;
}

inline std::vector<Complex> dft2d_real(const std::vector<double>& data, int width, int height) {
  return dft2d(std::vector<Complex>(data.begin(), data.end()), width, height, false);
}

}  // namespace segs
