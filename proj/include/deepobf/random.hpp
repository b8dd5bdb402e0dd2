#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace deepobf {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based stream derivation: every (component, counter) pair gets an
/// independent seed, so adding a consumer never shifts another's stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view component,
                                 std::uint64_t counter = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : component) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed ^ h) + counter);
}

inline Rng make_rng(std::uint64_t seed, std::string_view component, std::uint64_t counter = 0) {
  return Rng(derive_seed(seed, component, counter));
}

}  // namespace deepobf
