#pragma once

#include <cstdint>
#include <random>

namespace strataft {

/// SplitMix64 finalizer; used to derive well-separated seeds from (seed, stream) pairs.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic substream: the same (seed, stream) always yields the same generator,
/// independent of how many other streams exist or which thread draws from it.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(stream ^ 0xd1b54a32d192ed03ULL)));
}

}  // namespace strataft
