#pragma once

#include <cstdint>

namespace csn {

// splitmix64 finalizer; used to derive independent seed streams from one
// run seed without correlated low bits.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Fixed stream tags for the derived generators of one training run.
namespace seed_stream {
constexpr std::uint64_t model = 1;
constexpr std::uint64_t train_episodes = 2;
constexpr std::uint64_t validation = 3;
constexpr std::uint64_t support_net = 4;
}  // namespace seed_stream

}  // namespace csn
