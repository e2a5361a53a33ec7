#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string_view>

namespace vicoop {

// Counter-based deterministic stream, algorithm "vicoop-ctr-v1":
//   key     = mix(mix(seed) ^ fnv1a64(label))
//   draw[n] = mix(key + (n + 1) * 0x9E3779B97F4A7C15)
// where mix is the SplitMix64 finalizer. Output depends only on (seed, label,
// n), so it is identical across platforms and compilers. Do not change without
// bumping the version tag; traces and fixtures depend on it.
class SeededStream {
 public:
  using result_type = std::uint64_t;

  static constexpr std::string_view kAlgorithm = "vicoop-ctr-v1";

  SeededStream(std::uint64_t seed, std::string_view label);

  result_type operator()();

  // Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n);

  [[nodiscard]] std::uint64_t draws() const { return counter_; }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

SeededStream seeded_rng(std::uint64_t seed, std::string_view stream_label);

std::uint64_t splitmix64_mix(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace vicoop
