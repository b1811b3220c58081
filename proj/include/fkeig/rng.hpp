#pragma once
// Counter-based random streams.
//
// A stream is addressed by (seed, tag, step, index). Draws depend only on that
// address and the position within the stream, so a path's noise does not
// depend on how a batch is split across workers, and restoring a run only
// needs the seed and the step counter.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fkeig {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

enum class StreamTag : std::uint64_t {
  InitialPoints = 1,
  Brownian = 2,
  Validation = 3,
  Supervised = 4,
  Weights = 5,
  Scratch = 6,
};

class CounterRng {
 public:
  CounterRng(std::uint64_t seed, StreamTag tag, std::uint64_t step, std::uint64_t index)
      : key_(splitmix64(splitmix64(splitmix64(seed) ^ (static_cast<std::uint64_t>(tag) << 56) ^
                                   splitmix64(step)) ^
                         index)) {}

  std::uint64_t next_u64() { return splitmix64(key_ + 0x632BE59BD9B4E019ULL * ++counter_); }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fkeig
