#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "modguide/autodiff.hpp"
#include "modguide/nn.hpp"

namespace modguide {

/// Finite-difference gradient verification in 64-bit arithmetic.
///
/// The reported error for each coordinate is
///   |autodiff - central difference| / (|central difference| + 1e-8)
/// and the maximum over coordinates is returned.
struct GradCheckResult {
  double max_rel_error = 0.0;
  Index worst_coordinate = -1;
  double autodiff_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

using ScalarFn = std::function<Var<double>(Graph<double>&, const Var<double>&)>;

inline double grad_check_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

inline GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& x, double eps) {
  Graph<double> g;
  auto xv = g.leaf(x, true);
  auto out = f(g, xv);
  g.backward(out);
  const Tensor<double> analytic = g.grad(xv);

  auto eval = [&](const Tensor<double>& at, Index coord) {
    Graph<double> fg(false);
    double v = 0.0;
    try {
      v = f(fg, fg.constant(at)).value()[0];
    } catch (const NumericError& e) {
      throw NumericError("grad_check: coordinate " + std::to_string(coord) + ": " + e.what());
    }
    if (!std::isfinite(v)) {
      throw NumericError("grad_check: non-finite function value at coordinate " + std::to_string(coord));
    }
    return v;
  };

  GradCheckResult result;
  Tensor<double> probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = eval(probe, i);
    probe[i] = orig - eps;
    const double fm = eval(probe, i);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = grad_check_rel_error(analytic[i], numeric);
    if (err > result.max_rel_error || result.worst_coordinate < 0) {
      result = {err, i, analytic[i], numeric};
    }
  }
  return result;
}

/// Same check over every trainable parameter of `store`, for a loss built from
/// parameters borrowed off that store. Coordinates are numbered in store order.
inline GradCheckResult grad_check_parameters(ParameterStore<double>& store,
                                             const std::function<Var<double>(Graph<double>&)>& loss, double eps) {
  store.zero_grads();
  {
    Graph<double> g;
    auto out = loss(g);
    g.backward(out);
    g.accumulate_parameter_grads();
  }
  auto eval = [&](Index coord) {
    Graph<double> fg(false);
    double v = 0.0;
    try {
      v = loss(fg).value()[0];
    } catch (const NumericError& e) {
      throw NumericError("grad_check: parameter coordinate " + std::to_string(coord) + ": " + e.what());
    }
    if (!std::isfinite(v)) {
      throw NumericError("grad_check: non-finite loss at parameter coordinate " + std::to_string(coord));
    }
    return v;
  };

  GradCheckResult result;
  Index coord = 0;
  for (auto& p : store) {
    if (!p.tensor.requires_grad()) {
      coord += p.tensor.size();
      continue;
    }
    const Buffer<double> analytic = p.tensor.grad();
    auto data = p.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i, ++coord) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double fp = eval(coord);
      data[i] = orig - eps;
      const double fm = eval(coord);
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = grad_check_rel_error(analytic[i], numeric);
      if (err > result.max_rel_error || result.worst_coordinate < 0) {
        result = {err, coord, analytic[i], numeric};
      }
    }
  }
  return result;
}

}  // namespace modguide
