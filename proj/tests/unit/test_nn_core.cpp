#include "doctest.h"

#include <random>

#include "modguide/grad_check.hpp"
#include "modguide/nn.hpp"
#include "modguide/optim.hpp"

using namespace modguide;

namespace {

template <typename Scalar = double>
Tensor<Scalar> random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor<Scalar> t(std::move(shape));
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : t.data()) v = Scalar(d(rng));
  return t;
}

Tensor<float> mat(Index r, Index c, std::vector<float> v) { return Tensor<float>({r, c}, std::move(v)); }

// Weighted sum with fixed random weights, so no coordinate has a structurally
// zero gradient.
Var<double> weighted_sum(Graph<double>& g, const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = g.constant(random_tensor<double>(y.shape(), rng));
  return sum(mul(y, w));
}

constexpr double kTol = 1e-4;
constexpr double kEps = 1e-6;

}  // namespace

TEST_CASE("matmul examples") {
  Graph<float> g(false);
  SUBCASE("identity") {
    auto out = matmul(g.constant(mat(2, 2, {1, 0, 0, 1})), g.constant(mat(2, 2, {1, 2, 3, 4})));
    CHECK(out.value() == mat(2, 2, {1, 2, 3, 4}));
  }
  SUBCASE("projection") {
    auto out = matmul(g.constant(mat(2, 2, {1, 0, 0, 0})), g.constant(mat(2, 2, {5, 6, 7, 8})));
    CHECK(out.value() == mat(2, 2, {5, 6, 0, 0}));
  }
  SUBCASE("scalar") {
    auto out = matmul(g.constant(mat(1, 1, {2})), g.constant(mat(1, 1, {3})));
    CHECK(out.value()[0] == 6.0f);
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(g.constant(mat(2, 3, {1, 2, 3, 4, 5, 6})), g.constant(mat(2, 2, {1, 2, 3, 4})));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[2x2]") != std::string::npos);
    }
  }
}

TEST_CASE("matmul associativity in 32-bit") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Graph<float> g(false);
    auto a = g.constant(random_tensor<float>({3, 5}, rng));
    auto b = g.constant(random_tensor<float>({5, 4}, rng));
    auto c = g.constant(random_tensor<float>({4, 6}, rng));
    auto left = matmul(matmul(a, b), c);
    auto right = matmul(a, matmul(b, c));
    CHECK((left.m() - right.m()).cwiseAbs().maxCoeff() < 1e-4f);
  }
}

TEST_CASE("layer_norm examples") {
  Graph<float> g(false);
  SUBCASE("constant row maps to zeros") {
    auto out = layer_norm(g.constant(mat(1, 4, {3, 3, 3, 3})));
    for (float v : out.value().data()) CHECK(v == 0.0f);
  }
  SUBCASE("[1,-1]") {
    auto out = layer_norm(g.constant(mat(1, 2, {1, -1})));
    // mean 0, variance 1: 1/sqrt(1 + 1e-6)
    CHECK(out.value()[0] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-6)).epsilon(1e-7));
    CHECK(out.value()[1] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-6)).epsilon(1e-7));
  }
  SUBCASE("idempotent on a normalized row") {
    auto once = layer_norm(g.constant(mat(1, 4, {0.3f, -1.2f, 2.0f, 0.1f})));
    auto twice = layer_norm(once);
    CHECK((once.m() - twice.m()).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("attention weights") {
  std::mt19937_64 rng(3);
  Initializer init(5);
  ParameterStore<float> store;
  auto mha = MultiheadAttention::create(store, init, "attn", 8, 2);

  SUBCASE("single token attends to itself with weight 1") {
    Graph<float> g(false);
    AttentionWeights<float> w;
    auto x = g.constant(random_tensor<float>({1, 8}, rng));
    mha(g, store, x, x, &w);
    REQUIRE(w.size() == 2);
    for (const auto& head : w) CHECK(head(0, 0) == 1.0f);
  }
  SUBCASE("rows sum to one for every head and query") {
    Graph<float> g(false);
    AttentionWeights<float> w;
    auto x = g.constant(random_tensor<float>({6, 8}, rng, 3.0));
    mha(g, store, x, x, &w);
    for (const auto& head : w) {
      CHECK(head.rows() == 6);
      CHECK(head.cols() == 6);
      for (Index r = 0; r < head.rows(); ++r) CHECK(std::abs(head.row(r).sum() - 1.0f) < 1e-5f);
    }
  }
  SUBCASE("identical tokens give identical outputs") {
    Graph<float> g(false);
    auto row = random_tensor<float>({1, 8}, rng);
    Tensor<float> two({2, 8});
    two.matrix().row(0) = row.matrix();
    two.matrix().row(1) = row.matrix();
    auto x = g.constant(two);
    auto out = mha(g, store, x, x);
    CHECK(out.m().row(0) == out.m().row(1));
  }
  SUBCASE("heads must divide width") {
    ParameterStore<float> s2;
    CHECK_THROWS_AS(MultiheadAttention::create(s2, init, "bad", 8, 3), ConfigError);
    Graph<float> g(false);
    auto x = g.constant(random_tensor<float>({2, 8}, rng));
    CHECK_THROWS_AS(attention(x, x, x, 3), ConfigError);
  }
}

TEST_CASE("mlp block and SiLU") {
  CHECK(silu_value(0.0) == 0.0);
  CHECK(silu_value(1.0) == doctest::Approx(0.7310585786).epsilon(1e-9));

  ParameterStore<float> store;
  Initializer init(1);
  auto mlp = MlpBlock::create(store, init, "mlp", 4, 4);
  for (auto& p : store) std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0f);
  store[mlp.fc2.bias][2] = 0.5f;
  Graph<float> g(false);
  std::mt19937_64 rng(2);
  auto out = mlp(g, store, g.constant(random_tensor<float>({3, 4}, rng)));
  for (Index r = 0; r < 3; ++r) {
    CHECK(out.m()(r, 0) == 0.0f);
    CHECK(out.m()(r, 2) == 0.5f);
  }
}

TEST_CASE("grad_check closed forms") {
  SUBCASE("sum of squares") {
    Graph<double> g;
    auto x = g.leaf(Tensor<double>({2}, {1.0, 2.0}));
    g.backward(sum(mul(x, x)));
    auto grad = g.grad(x);
    CHECK(grad[0] == 2.0);
    CHECK(grad[1] == 4.0);
    auto r = grad_check([](Graph<double>&, const Var<double>& v) { return sum(mul(v, v)); },
                        Tensor<double>({2}, {1.0, 2.0}), 1e-6);
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("linear function") {
    auto r = grad_check([](Graph<double>&, const Var<double>& v) { return sum(v); },
                        Tensor<double>({3}, {0.5, -1.0, 4.0}), 1e-3);
    CHECK(r.max_rel_error < 1e-8);
  }
  SUBCASE("non-finite value is reported with its coordinate") {
    // Finite at x, overflows once the second coordinate is perturbed upwards.
    auto f = [](Graph<double>& g, const Var<double>& v) {
      auto cut = g.constant(Tensor<double>({2}, {0.0, 1e300}));
      return sum(mul(mul(v, cut), cut));
    };
    try {
      grad_check(f, Tensor<double>({2}, {1.0, 0.0}), 1e-3);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("coordinate 1") != std::string::npos);
    }
  }
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  std::mt19937_64 rng(42);
  auto check = [&](const char* name, Shape shape, const ScalarFn& f) {
    for (int trial = 0; trial < 3; ++trial) {
      const auto x = random_tensor<double>(shape, rng);
      const auto r = grad_check(f, x, kEps);
      if (r.max_rel_error >= kTol) {
        MESSAGE(std::string(name), ": coordinate ", r.worst_coordinate, " autodiff ", r.autodiff_at_worst, " numeric ",
                r.numeric_at_worst);
      }
      CHECK(r.max_rel_error < kTol);
    }
  };
  const auto other = random_tensor<double>({4, 3}, rng);
  const auto row = random_tensor<double>({3}, rng);

  check("matmul-left", {2, 4}, [&](auto& g, const auto& x) { return weighted_sum(g, matmul(x, g.constant(other)), 1); });
  check("matmul-right", {3, 4},
        [&](auto& g, const auto& x) { return weighted_sum(g, matmul(g.constant(other), x), 2); });
  check("linear", {3},
        [&](auto& g, const auto& b) {
          std::mt19937_64 r(9);
          auto x = g.constant(random_tensor<double>({5, 4}, r));
          return weighted_sum(g, linear(x, g.constant(other), b), 3);
        });
  check("add/sub/mul", {3, 3}, [&](auto& g, const auto& x) {
    return weighted_sum(g, mul(add(x, x), sub(x, scale(x, 0.3))), 4);
  });
  check("add_row", {3}, [&](auto& g, const auto& r) {
    return weighted_sum(g, add_row(g.constant(other), r), 5);
  });
  check("scale_shift_rows input", {4, 3}, [&](auto& g, const auto& x) {
    return weighted_sum(g, scale_shift_rows(x, g.constant(row), g.constant(row)), 6);
  });
  check("scale_shift_rows scale", {3}, [&](auto& g, const auto& a) {
    return weighted_sum(g, scale_shift_rows(g.constant(other), a, g.constant(row)), 7);
  });
  check("scale_shift_rows shift", {3}, [&](auto& g, const auto& b) {
    return weighted_sum(g, scale_shift_rows(g.constant(other), g.constant(row), b), 8);
  });
  check("layer_norm", {3, 5}, [&](auto& g, const auto& x) { return weighted_sum(g, layer_norm(x), 9); });
  check("silu", {4, 4}, [&](auto& g, const auto& x) { return weighted_sum(g, silu(x), 10); });
  check("softmax_rows", {3, 4}, [&](auto& g, const auto& x) { return weighted_sum(g, softmax_rows(x), 11); });
  check("attention q", {5, 4}, [&](auto& g, const auto& x) {
    std::mt19937_64 r(12);
    auto kv = g.constant(random_tensor<double>({6, 4}, r));
    return weighted_sum(g, attention(x, kv, kv, 2), 13);
  });
  check("attention kv", {6, 4}, [&](auto& g, const auto& x) {
    std::mt19937_64 r(14);
    auto q = g.constant(random_tensor<double>({5, 4}, r));
    return weighted_sum(g, attention(q, x, x, 2), 15);
  });
  check("self attention", {5, 6}, [&](auto& g, const auto& x) { return weighted_sum(g, attention(x, x, x, 3), 16); });
  check("concat/slice rows", {4, 3}, [&](auto& g, const auto& x) {
    auto c = concat_rows<double>({slice_rows(x, 1, 2), x, g.constant(other)});
    return weighted_sum(g, c, 17);
  });
  check("concat_cols", {2, 3}, [&](auto& g, const auto& x) { return weighted_sum(g, concat_cols(x, x), 18); });
  check("gather", {2, 3}, [&](auto& g, const auto& x) {
    auto idx = std::make_shared<const std::vector<Index>>(std::vector<Index>{5, 0, 0, 3, 2, 1, 4, 4});
    return weighted_sum(g, gather(x, idx, {4, 2}), 19);
  });
  check("reshape/mean", {2, 6}, [&](auto&, const auto& x) { return mean(mul(reshape(x, {3, 4}), reshape(x, {3, 4}))); });
  const auto target = random_tensor<double>({3, 3}, rng);
  check("mse", {3, 3}, [&](auto& g, const auto& x) { return mse(x, g.constant(target)); });
}

TEST_CASE("full projected block forward-sum passes gradient check at random init") {
  ParameterStore<double> store;
  Initializer init(77);
  // Larger init than the training default so that gradients are well above the
  // finite-difference noise floor.
  auto mha = MultiheadAttention::create(store, init, "attn", 8, 2);
  auto mlp = MlpBlock::create(store, init, "mlp", 8, 2);
  for (auto& p : store) {
    std::normal_distribution<double> d(0.0, 0.4);
    for (auto& v : p.tensor.data()) v = d(init.rng());
  }
  std::mt19937_64 rng(8);
  const auto x = random_tensor<double>({5, 8}, rng);
  auto loss = [&](Graph<double>& g) {
    auto h = g.constant(x);
    h = add(h, mha(g, store, layer_norm(h), layer_norm(h)));
    h = add(h, mlp(g, store, layer_norm(h)));
    return weighted_sum(g, h, 21);
  };
  const auto r = grad_check_parameters(store, loss, kEps);
  INFO("worst coordinate " << r.worst_coordinate);
  CHECK(r.max_rel_error < kTol);
}

TEST_CASE("non-finite values are rejected at the producing node") {
  Graph<float> g(false);
  auto big = g.constant(Tensor<float>({1}, {3e38f}));
  CHECK_THROWS_AS(add(big, big), NumericError);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParameterStore<float> store;
    store.add("w", Tensor<float>({2, 2}, {1, 2, 3, 4}));
    store.zero_grads();
    OptimizerState state;
    adam_step(store, state);
    CHECK(store[0] == Tensor<float>({2, 2}, {1, 2, 3, 4}));
  }
  SUBCASE("single scalar step") {
    ParameterStore<float> store;
    store.add("w", Tensor<float>({1}, {0.0f}));
    store[0].grad()[0] = 1.0f;
    OptimizerState state;
    state.config.lr = 0.1;
    adam_step(store, state);
    CHECK(store[0][0] == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(state.first_moment.at("w").size() == 1);
    CHECK(state.second_moment.at("w").size() == 1);
  }
  SUBCASE("moment buffers match parameter shapes") {
    ParameterStore<float> store;
    store.add("a", Tensor<float>({3, 2}));
    store.add("b", Tensor<float>({5}));
    store.add("frozen", Tensor<float>({4}), false);
    store.zero_grads();
    OptimizerState state;
    adam_step(store, state);
    CHECK(state.first_moment.at("a").size() == 6);
    CHECK(state.second_moment.at("b").size() == 5);
    CHECK(state.first_moment.count("frozen") == 0);
  }
  SUBCASE("missing gradient names the parameter") {
    ParameterStore<float> store;
    store.add("lonely", Tensor<float>({1}));
    OptimizerState state;
    try {
      adam_step(store, state);
      FAIL("expected error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("lonely") != std::string::npos);
    }
  }
}

TEST_CASE("repeated runs are bit-identical") {
  auto run = [] {
    ParameterStore<float> store;
    Initializer init(123);
    auto mha = MultiheadAttention::create(store, init, "attn", 16, 4);
    std::mt19937_64 rng(5);
    Graph<float> g(false);
    auto x = g.constant(random_tensor<float>({7, 16}, rng));
    return mha(g, store, x, x).value();
  };
  CHECK(bit_identical(run(), run()));
}
