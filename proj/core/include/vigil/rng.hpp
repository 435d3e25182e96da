#pragma once

#include <cstdint>
#include <random>

namespace vigil {

// Seeded pseudorandom source. mt19937_64 is fully specified by the
// standard, and the uniform/normal transforms below avoid the
// implementation-defined std distributions, so a seed pins the whole
// draw sequence.
class SeededRng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/polar";

  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive on both ends.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const double span = static_cast<double>(hi - lo + 1);
    auto v = lo + static_cast<std::int64_t>(uniform() * span);
    return v > hi ? hi : v;
  }

  // Standard normal via Marsaglia's polar method (pairs cached).
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Deterministic child stream; children with distinct ids are independent
  // for all practical purposes and reproducible from (seed, id).
  SeededRng fork(std::uint64_t stream_id) const;

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vigil
