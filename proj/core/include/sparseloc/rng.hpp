#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace sparseloc {

// All randomness in the project flows from one root seed through named
// substreams ("data", "init", "order", ...), so the stream consumed by one
// component does not shift when another component's usage changes.
//
// mt19937_64 output is fully specified by the standard; the uniform and
// normal draws below are hand-rolled on top of it so that generated bytes do
// not depend on standard-library distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] via rejection-free modulo on 64-bit output;
  // bias is negligible for the small ranges used here (< 2^32).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<std::int64_t>(engine_() % span);
  }

  // Standard normal via Box-Muller. One value per call; the spare is kept.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// FNV-1a, used for substream derivation and config hashing.
std::uint64_t fnv1a(std::string_view text);

std::uint64_t splitmix64(std::uint64_t x);

// Derives the seed of a named substream from the root seed.
std::uint64_t substream_seed(std::uint64_t root_seed, std::string_view name);

inline Rng substream(std::uint64_t root_seed, std::string_view name) {
  return Rng(substream_seed(root_seed, name));
}

}  // namespace sparseloc
