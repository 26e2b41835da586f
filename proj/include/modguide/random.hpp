#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "modguide/tensor.hpp"

namespace modguide {

// The standard distributions are implementation-defined, so every draw that
// ends up in an artifact goes through these helpers instead.

/// Uniform double in [0, 1).
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Standard normal via Box-Muller; one draw per call.
inline double standard_normal(std::mt19937_64& rng) {
  const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename Scalar>
Tensor<Scalar> normal_tensor(std::mt19937_64& rng, Shape shape) {
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.data()) v = Scalar(standard_normal(rng));
  return t;
}

/// Derives an independent stream seed from a base seed and a tag.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace modguide
