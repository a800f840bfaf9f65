#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedned {

using RandomStream = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Stable seed for a sub-stream identified by a key path, e.g. (master, round, client).
/// Independent of call order and thread scheduling.
constexpr std::uint64_t derive_seed(std::uint64_t master,
                                    std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = mix64(master);
  for (std::uint64_t k : keys) h = mix64(h ^ mix64(k + 0x632BE59BD9B4E019ULL));
  return h;
}

inline RandomStream make_stream(std::uint64_t seed) { return RandomStream{seed}; }

/// Stream purposes, used as the last key of derive_seed.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kSampling = 2;
inline constexpr std::uint64_t kClient = 3;
inline constexpr std::uint64_t kUncertainty = 4;
inline constexpr std::uint64_t kPseudo = 5;
inline constexpr std::uint64_t kData = 6;
inline constexpr std::uint64_t kPartition = 7;
inline constexpr std::uint64_t kNoise = 8;
inline constexpr std::uint64_t kSplit = 9;
inline constexpr std::uint64_t kPublic = 10;
}  // namespace stream

}  // namespace fedned
