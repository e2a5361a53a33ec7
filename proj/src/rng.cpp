#include "vicoop/rng.hpp"

#include <stdexcept>

namespace vicoop {

std::uint64_t splitmix64_mix(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

SeededStream::SeededStream(std::uint64_t seed, std::string_view label)
    : key_(splitmix64_mix(splitmix64_mix(seed) ^ fnv1a64(label))) {}

SeededStream::result_type SeededStream::operator()() {
  ++counter_;
  return splitmix64_mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
}

double SeededStream::uniform() {
  return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

double SeededStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t SeededStream::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("SeededStream::below: n must be positive");
  // Rejection sampling keeps the result unbiased.
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t x = (*this)();
  while (x >= limit) x = (*this)();
  return x % n;
}

SeededStream seeded_rng(std::uint64_t seed, std::string_view stream_label) {
  return SeededStream(seed, stream_label);
}

}  // namespace vicoop
