#pragma once

#include <cstdint>

namespace advtrain {

// splitmix64 step; used to derive independent stream seeds from
// (base_seed, epoch, batch, purpose) without carrying RNG state across
// epochs, which keeps resumed runs bit-identical.
inline uint64_t mix_seed(uint64_t a) {
  a += 0x9E3779B97F4A7C15ull;
  a = (a ^ (a >> 30)) * 0xBF58476D1CE4E5B9ull;
  a = (a ^ (a >> 27)) * 0x94D049BB133111EBull;
  return a ^ (a >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return mix_seed(mix_seed(a) ^ b); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b) ^ c);
}
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return mix_seed(mix_seed(a, b, c) ^ d);
}

}  // namespace advtrain
