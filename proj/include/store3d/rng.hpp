#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace store3d {

// SplitMix64 finalizer. All randomness in the project goes through this so
// that runs are bit-reproducible across platforms (no std::*_distribution).
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(mix64(a) ^ b); }
inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) {
  return mix64(mix64(a, b) ^ c);
}

// Maps 64 random bits to (0, 1), never hitting either endpoint.
inline double bits_to_unit(uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// Counter-keyed uniform in (0,1): same (seed, stage, element) -> same value.
inline double keyed_uniform(uint64_t seed, uint64_t stage, uint64_t element) {
  return bits_to_unit(mix64(seed, stage, element));
}

// Standard Gumbel(0,1) noise from the keyed stream.
inline double keyed_gumbel(uint64_t seed, uint64_t stage, uint64_t element) {
  double u = keyed_uniform(seed, stage, element);
  return -std::log(-std::log(u));
}

// FNV-1a, for keying streams by identifiers.
inline uint64_t hash_string(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Small sequential generator for data synthesis and parameter init.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix64(seed)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  double uniform() { return bits_to_unit(next_u64()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  // Box-Muller; one value per call, no cached spare (keeps streams simple).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  Rng fork(uint64_t stream) const { return Rng(mix64(state_, stream)); }

 private:
  uint64_t state_;
};

}  // namespace store3d
