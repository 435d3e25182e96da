#pragma once

#include <cstdint>
#include <string>

namespace vigil {

// FNV-1a over bytes; good enough to stamp configs and spot mismatched
// pipeline stages. Not cryptographic.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value);

}  // namespace vigil
