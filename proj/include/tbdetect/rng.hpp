#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace tb {

// SplitMix64: the project-wide random generator. A 64-bit counter advanced by
// a fixed odd gamma and passed through a finalizing mix, so sequences are
// identical on every platform. All seeded behaviour (weight init, dropout,
// shuffles, synthetic scenes) goes through this type; std:: distributions are
// avoided because their output is implementation-defined.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // Uniform integer in [0, bound) via rejection-free Lemire reduction.
  std::uint64_t next_below(std::uint64_t bound);

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller (one value per call; the pair is not cached
  // so the draw count stays predictable).
  double normal();

  // Derives an independent stream, e.g. one per image index.
  static SplitMix64 derive(std::uint64_t seed, std::uint64_t stream) {
    SplitMix64 mixer(seed ^ (0xA0761D6478BD642FULL * (stream + 1)));
    return SplitMix64(mixer.next_u64());
  }

 private:
  std::uint64_t state_;
};

// In-place Fisher-Yates shuffle driven by SplitMix64 (std::shuffle output is
// implementation-defined, which would break run-to-run byte equality).
template <typename T>
void deterministic_shuffle(std::vector<T>& items, SplitMix64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace tb
