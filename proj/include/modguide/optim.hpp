#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "modguide/nn.hpp"

namespace modguide {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments keyed by parameter name.
struct OptimizerState {
  AdamConfig config;
  long step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

/// Rescales all trainable gradients so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(ParameterStore<Scalar>& store, double max_norm) {
  double sq = 0.0;
  for (auto& p : store) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    for (Scalar g : p.tensor.grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar f = Scalar(max_norm / norm);
    for (auto& p : store) {
      if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
      for (Scalar& g : p.tensor.grad()) g *= f;
    }
  }
  return norm;
}

/// One bias-corrected Adam update over every trainable parameter in `store`.
template <typename Scalar>
void adam_step(ParameterStore<Scalar>& store, OptimizerState& state) {
  for (const auto& p : store) {
    if (p.tensor.requires_grad() && !p.tensor.has_grad()) {
      throw ConfigError("adam_step: parameter '" + p.name + "' has no gradient");
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(state.step));
  for (auto& p : store) {
    if (!p.tensor.requires_grad()) continue;
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    const std::size_t n = static_cast<std::size_t>(p.tensor.size());
    if (m.size() != n) m.assign(n, 0.0);
    if (v.size() != n) v.assign(n, 0.0);
    auto data = p.tensor.data();
    const auto& grad = p.tensor.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] = Scalar(double(data[i]) - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

}  // namespace modguide
