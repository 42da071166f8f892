#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace transhp {

// Error taxonomy. Callers can catch the base Error or a specific kind.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error { using Error::Error; };       // dimension mismatch
struct IndexError : Error { using Error::Error; };       // out-of-range index
struct NumericError : Error { using Error::Error; };     // non-finite input, divergence
struct ContractError : Error { using Error::Error; };    // precondition violated
struct ValidationError : Error { using Error::Error; };  // semantic validation failure
struct ParseError : Error { using Error::Error; };       // malformed input file
struct ConfigError : Error { using Error::Error; };      // inconsistent configuration
struct IoError : Error { using Error::Error; };          // filesystem failure

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += "x";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

// FNV-1a, used for content fingerprints and per-name RNG streams.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Independent RNG stream for a named entity under a global seed. Every
// parameter and data stream derives from one of these, so adding or removing
// one consumer never shifts the draws of another.
inline std::mt19937_64 named_rng(uint64_t seed, std::string_view name) {
  return std::mt19937_64(splitmix64(seed ^ fnv1a(name)));
}

inline std::mt19937_64 indexed_rng(uint64_t seed, std::string_view name, uint64_t index) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ fnv1a(name)) + index));
}

}  // namespace transhp
