#pragma once

#include <cstdint>
#include <string_view>

namespace safe {

/// Counter-based random stream. A stream is identified by its root seed and
/// the (label, index) derivation path that produced it; draw `i` of a stream
/// is a pure function of (key, i), so results do not depend on platform,
/// thread schedule, or how many draws other streams consumed.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t root_seed = 0);

  /// Child stream for (label, index). Pure: does not advance this stream.
  SeedStream derive(std::string_view label, std::uint64_t index = 0) const;

  std::uint64_t root() const { return root_; }
  std::uint64_t key() const { return key_; }
  std::uint64_t position() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n); rejection sampling, so exactly uniform.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (consumes two draws).
  double normal();

 private:
  SeedStream(std::uint64_t root, std::uint64_t key) : root_(root), key_(key) {}

  std::uint64_t root_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

}  // namespace safe
