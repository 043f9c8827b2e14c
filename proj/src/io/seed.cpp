#include "safe/io/seed.hpp"

#include <cmath>
#include <numbers>

#include "safe/error.hpp"

namespace safe {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

namespace {

std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

SeedStream::SeedStream(std::uint64_t root_seed)
    : root_(root_seed), key_(mix64(root_seed ^ 0x5AFE5AFE5AFE5AFEull)) {}

SeedStream SeedStream::derive(std::string_view label, std::uint64_t index) const {
  const std::uint64_t k = mix64(key_ ^ mix64(hash_label(label)) ^ mix64(index + 0x632BE59BD9B4E019ull));
  return SeedStream(root_, mix64(k));
}

std::uint64_t SeedStream::next_u64() {
  return mix64(key_ + 0x9E3779B97F4A7C15ull * (++counter_));
}

double SeedStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeedStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t SeedStream::below(std::uint64_t n) {
  require(n > 0, "SeedStream::below requires n > 0");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double SeedStream::normal() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace safe
