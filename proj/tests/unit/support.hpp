#pragma once

#include <random>

#include "modguide/dit.hpp"
#include "modguide/random.hpp"

namespace test_support {

using namespace modguide;

/// Small model that keeps the default text and image geometry.
inline ModelConfig tiny_config(Index d = 16, Index layers = 2) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = layers;
  c.heads = 2;
  c.time_dim = 16;
  c.mlp_multiplier = 2;
  return c;
}

/// Overwrites every parameter with N(0, stddev) so that no path is inert,
/// including the zero-initialized modulation heads.
template <typename Scalar>
void randomize(ParameterStore<Scalar>& store, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  for (auto& p : store)
    for (auto& v : p.tensor.data()) v = Scalar(stddev * standard_normal(rng));
}

}  // namespace test_support
