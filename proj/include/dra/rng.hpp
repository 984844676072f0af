#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "dra/tensor.hpp"

namespace dra {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent child seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Child seed for a (base, tag...) path. Distinct paths give unrelated streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = mix64(base);
  for (std::uint64_t t : tags) s = mix64(s ^ mix64(t + 0x632be59bd9b4e019ULL));
  return s;
}

// Stream tags so that call sites never share a generator by accident.
enum class Stream : std::uint64_t {
  kInit = 1,
  kData = 2,
  kShuffle = 3,
  kAttack = 4,
  kDiffusionNoise = 5,
  kDraTarget = 6,
  kSynthetic = 7,
  kSampler = 8,
  kProbe = 9,
  kEot = 10,
  kSae = 11,
  kSigma = 12,
};

inline std::uint64_t stream_seed(std::uint64_t base, Stream s, std::uint64_t index = 0) {
  return derive_seed(base, {static_cast<std::uint64_t>(s), index});
}

Tensor normal_tensor(const Shape& shape, Rng& rng, double stddev = 1.0);
Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi);

}  // namespace dra
