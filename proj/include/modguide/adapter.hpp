#pragma once

#include <cstdint>

#include "modguide/dit.hpp"

namespace modguide {

inline constexpr Index kDefaultAdapterWidth = 64;

/// Two-layer network from a pooled embedding into the timestep-embedding space.
/// Its contribution is g(e) = f(e) - f(0), so g(0) is exactly zero for every
/// parameter value, not only at initialization.
template <typename Scalar>
struct PooledAdapter {
  Index d_pool = toy::kPooledDim;
  Index width = kDefaultAdapterWidth;
  Index out_dim = 64;
  ParameterStore<Scalar> params;
  LinearLayer fc1;
  LinearLayer fc2;

  static PooledAdapter create(Index d_pool, Index width, Index out_dim, std::uint64_t seed) {
    if (d_pool < 1 || width < 1 || out_dim < 1) throw ConfigError("adapter dimensions must be >= 1");
    PooledAdapter a;
    a.d_pool = d_pool;
    a.width = width;
    a.out_dim = out_dim;
    Initializer init(seed);
    a.fc1 = LinearLayer::create(a.params, init, "adapter.fc1", d_pool, width);
    a.fc2 = LinearLayer::create(a.params, init, "adapter.fc2", width, out_dim);
    return a;
  }

  static PooledAdapter for_model(const ModelConfig& c, Index width, std::uint64_t seed) {
    return create(c.d_pool, width, c.time_dim, seed);
  }

  Var<Scalar> f(Graph<Scalar>& g, const Var<Scalar>& e) { return fc2(g, params, silu(fc1(g, params, e))); }

  /// g(e) = f(e) - f(0) as a [1 x out_dim] node.
  Var<Scalar> contribution(Graph<Scalar>& g, const Tensor<Scalar>& pooled) {
    if (pooled.size() != d_pool) {
      throw DimensionError("adapter expects a pooled vector of " + std::to_string(d_pool) + " entries, got " +
                           std::to_string(pooled.size()));
    }
    const auto e = g.constant(pooled.reshaped({1, d_pool}));
    const auto zero = g.constant(Tensor<Scalar>({1, d_pool}));
    return sub(f(g, e), f(g, zero));
  }
};

}  // namespace modguide
