#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace spn {

// Every random draw in the project flows from one user seed through named
// sub-streams, so any reported number can be replayed in isolation.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the stream name
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ h);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view stream,
                              std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(mix_seed(seed, stream) ^ splitmix64(a ^ splitmix64(b)));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream) {
  return std::mt19937_64(mix_seed(seed, stream));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream,
                                std::uint64_t a, std::uint64_t b = 0) {
  return std::mt19937_64(mix_seed(seed, stream, a, b));
}

}  // namespace spn
