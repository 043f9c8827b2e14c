#pragma once

#include <complex>
#include <cstddef>
#include <numbers>
#include <vector>

#include "safe/augment/augment.hpp"
#include "safe/io/seed.hpp"

namespace safe::spectral {

using cd = std::complex<double>;

inline augment::ComplexPlane<double> white_noise(std::size_t h, std::size_t w, SeedStream& rng) {
  augment::ComplexPlane<double> p{h, w, std::vector<cd>(h * w)};
  for (auto& z : p.data) z = cd(rng.normal(), rng.normal());
  return p;
}

/// Unnormalized forward 2-D DFT, one axis at a time.
inline std::vector<cd> dft2(const augment::ComplexPlane<double>& p) {
  const std::size_t H = p.height, W = p.width;
  std::vector<cd> tmp(H * W), out(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t v = 0; v < W; ++v) {
      cd s = 0.0;
      for (std::size_t x = 0; x < W; ++x)
        s += p.data[y * W + x] * std::polar(1.0, -2.0 * std::numbers::pi * double(v * x) / double(W));
      tmp[y * W + v] = s;
    }
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      cd s = 0.0;
      for (std::size_t y = 0; y < H; ++y)
        s += tmp[y * W + v] * std::polar(1.0, -2.0 * std::numbers::pi * double(u * y) / double(H));
      out[u * W + v] = s;
    }
  return out;
}

/// Whether DFT bin u of an n-point axis lies in the centred band of `kept` bins.
inline bool in_band(std::size_t u, std::size_t n, std::size_t kept) {
  const auto f = static_cast<std::ptrdiff_t>(u <= n / 2 ? u : 0) - static_cast<std::ptrdiff_t>(u <= n / 2 ? 0 : n - u);
  const auto lo = -static_cast<std::ptrdiff_t>(kept / 2);
  const auto hi = static_cast<std::ptrdiff_t>(kept - kept / 2) - 1;
  return f >= lo && f <= hi;
}

}  // namespace safe::spectral
