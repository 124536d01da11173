#pragma once

#include <cstddef>
#include <cstdint>

namespace tnet {

// FNV-1a, used for parameter/mask fingerprints in reports and tests.
class Fnv1a64 {
 public:
  void update(const void* bytes, size_t n) {
    const auto* p = static_cast<const uint8_t*>(bytes);
    for (size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  uint64_t digest() const { return state_; }

 private:
  uint64_t state_ = 0xcbf29ce484222325ULL;
};

// CRC-32 (IEEE, reflected polynomial), used for checkpoint payload checksums.
uint32_t crc32(const void* bytes, size_t n, uint32_t seed = 0);

// splitmix64 mix step; used to derive per-layer RNG streams from one seed.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace tnet
