#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "modguide/autodiff.hpp"

namespace modguide {

/// Named trainable tensor. Names are dotted paths, stable across save/load.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> tensor;
};

/// Ordered, name-unique collection of parameters.
///
/// Layers refer to their parameters by slot index, so a model can be copied or
/// cast to another scalar type without fixing up pointers.
template <typename Scalar>
class ParameterStore {
 public:
  using Slot = std::size_t;

  Slot add(std::string name, Tensor<Scalar> init, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    init.set_requires_grad(trainable);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter<Scalar>{std::move(name), std::move(init)});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Tensor<Scalar>& operator[](Slot s) { return params_[s].tensor; }
  const Tensor<Scalar>& operator[](Slot s) const { return params_[s].tensor; }
  Parameter<Scalar>& at(Slot s) { return params_[s]; }
  const Parameter<Scalar>& at(Slot s) const { return params_[s]; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Slot slot(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void set_trainable(bool on) {
    for (auto& p : params_) p.tensor.set_requires_grad(on);
  }

  /// Allocates zeroed gradient buffers for every trainable parameter.
  void zero_grads() {
    for (auto& p : params_) {
      if (!p.tensor.requires_grad()) continue;
      auto& g = p.tensor.grad();
      std::fill(g.begin(), g.end(), Scalar(0));
    }
  }

  Index element_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  template <typename Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out;
    for (const auto& p : params_) out.add(p.name, p.tensor.template cast<Other>(), p.tensor.requires_grad());
    return out;
  }

 private:
  std::deque<Parameter<Scalar>> params_;
  std::map<std::string, Slot> index_;
};

/// Seeded normal initializer; draws are consumed in parameter creation order.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename Scalar>
  Tensor<Scalar> normal(Shape shape, double stddev) {
    Tensor<Scalar> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = Scalar(dist(rng_));
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline constexpr double kInitStddev = 0.02;

/// Affine map x W + b with W stored as [in x out].
struct LinearLayer {
  ParameterStore<float>::Slot weight = 0;
  ParameterStore<float>::Slot bias = 0;
  Index in = 0;
  Index out = 0;
  bool has_bias = true;

  enum class Init { normal, zero };

  template <typename Scalar>
  static LinearLayer create(ParameterStore<Scalar>& store, Initializer& init, const std::string& name, Index in,
                            Index out, Init mode = Init::normal, bool with_bias = true) {
    LinearLayer l;
    l.in = in;
    l.out = out;
    l.has_bias = with_bias;
    l.weight = store.add(name + ".weight", mode == Init::zero ? Tensor<Scalar>({in, out})
                                                             : init.normal<Scalar>({in, out}, kInitStddev));
    if (with_bias) l.bias = store.add(name + ".bias", Tensor<Scalar>({out}));
    return l;
  }

  template <typename Scalar>
  Var<Scalar> operator()(Graph<Scalar>& g, ParameterStore<Scalar>& store, const Var<Scalar>& x) const {
    if (!has_bias) return matmul(x, g.parameter(store[weight]));
    return linear(x, g.parameter(store[weight]), g.parameter(store[bias]));
  }
};

/// linear -> SiLU -> linear.
struct MlpBlock {
  LinearLayer fc1;
  LinearLayer fc2;

  template <typename Scalar>
  static MlpBlock create(ParameterStore<Scalar>& store, Initializer& init, const std::string& name, Index width,
                         Index hidden_multiplier) {
    MlpBlock m;
    m.fc1 = LinearLayer::create(store, init, name + ".fc1", width, width * hidden_multiplier);
    m.fc2 = LinearLayer::create(store, init, name + ".fc2", width * hidden_multiplier, width);
    return m;
  }

  template <typename Scalar>
  Var<Scalar> operator()(Graph<Scalar>& g, ParameterStore<Scalar>& store, const Var<Scalar>& x) const {
    return fc2(g, store, silu(fc1(g, store, x)));
  }
};

/// Projected multi-head attention: softmax(Q K^T / sqrt(d/heads)) V, then an output projection.
struct MultiheadAttention {
  LinearLayer q;
  LinearLayer k;
  LinearLayer v;
  LinearLayer o;
  Index heads = 1;

  template <typename Scalar>
  static MultiheadAttention create(ParameterStore<Scalar>& store, Initializer& init, const std::string& name,
                                   Index width, Index heads) {
    if (heads <= 0 || width % heads != 0) {
      throw ConfigError("attention width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                        " heads");
    }
    MultiheadAttention a;
    a.heads = heads;
    a.q = LinearLayer::create(store, init, name + ".q", width, width);
    // A key bias only shifts every logit of a query by the same amount, so it is omitted.
    a.k = LinearLayer::create(store, init, name + ".k", width, width, LinearLayer::Init::normal, false);
    a.v = LinearLayer::create(store, init, name + ".v", width, width);
    a.o = LinearLayer::create(store, init, name + ".o", width, width);
    return a;
  }

  template <typename Scalar>
  Var<Scalar> operator()(Graph<Scalar>& g, ParameterStore<Scalar>& store, const Var<Scalar>& q_src,
                         const Var<Scalar>& kv_src, AttentionWeights<Scalar>* record = nullptr) const {
    auto qq = q(g, store, q_src);
    auto kk = k(g, store, kv_src);
    auto vv = v(g, store, kv_src);
    return o(g, store, attention(qq, kk, vv, heads, record));
  }
};

}  // namespace modguide
