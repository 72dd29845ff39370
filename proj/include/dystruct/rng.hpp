#pragma once

// Deterministic randomness. One master seed per run; every stochastic site
// derives a labeled substream so replays are bit-stable regardless of how
// other sites consume their streams. All arithmetic is plain uint64/double,
// no <random> distributions, so streams are identical across platforms.

#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>

#include "dystruct/core.hpp"

namespace dystruct {

namespace detail {

inline std::uint64_t splitmix_finalize(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

inline std::uint64_t hash_tokens(std::span<const TokenId> tokens) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (TokenId t : tokens) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t));
    h *= 0x100000001B3ULL;
  }
  return h;
}

// ============================================================================
// SeedStream
// ============================================================================

/// Splitmix64 stream addressed by (master seed, derivation path). Equal seed
/// and path always give an identical stream; derive() never consumes from the
/// parent.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t master_seed)
      : state_(detail::splitmix_finalize(master_seed ^ 0x6A09E667F3BCC909ULL)) {}

  SeedStream derive(std::string_view label, std::uint64_t index = 0) const {
    std::uint64_t h = detail::fnv1a64(label);
    h ^= 0x9E3779B97F4A7C15ULL * (index + 1);
    SeedStream child(0);
    child.state_ = detail::splitmix_finalize(state_ ^ h);
    return child;
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return detail::splitmix_finalize(state_);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

// ============================================================================
// Poisson sampling by CDF inversion
// ============================================================================

/// Exact inversion sampler: walks the CDF until it passes a uniform draw.
/// For the window-length range used here (mu <= 48) e^-mu stays well above
/// the double underflow threshold, so the walk is exact.
inline int poisson_sample(double mu, SeedStream& stream) {
  require(mu >= 0.0 && std::isfinite(mu), Errc::bad_argument, "poisson_sample: bad mu");
  if (mu == 0.0) return 0;
  const double u = stream.next_unit();
  double p = std::exp(-mu);
  double cum = p;
  int k = 0;
  while (cum <= u && k < 4096) {
    ++k;
    p *= mu / static_cast<double>(k);
    cum += p;
    if (p == 0.0) break;  // tail underflow; u was astronomically close to 1
  }
  return k;
}

}  // namespace dystruct
