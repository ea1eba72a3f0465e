#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace ice {

// FNV-1a, 64 bit. Stable across platforms and runs; not for security.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_row(std::uint64_t row, std::uint64_t salt) {
  return splitmix64(splitmix64(row) ^ splitmix64(salt + 0x51ed270b27a1f3c5ULL));
}

std::string to_hex(std::uint64_t value);
std::uint64_t from_hex(std::string_view text);

}  // namespace ice
