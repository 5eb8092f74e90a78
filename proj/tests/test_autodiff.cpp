#include "doctest.h"

#include <cmath>
#include <limits>

#include "support.hpp"
#include "tsdpo/autodiff.hpp"

using namespace tsdpo;
using namespace tsdpo::testing;

namespace {

struct Case {
  const char* name;
  std::function<NodeId(Graph&)> build;
  // Inputs that get random values; anything positive-only is flagged.
  std::vector<std::pair<std::string, Shape>> inputs;
};

std::vector<Case> primitive_cases() {
  return {
      {"matmul", [](Graph& g) { return g.matmul(g.input("a", {3, 4}), g.input("b", {4, 2})); },
       {{"a", {3, 4}}, {"b", {4, 2}}}},
      {"transpose", [](Graph& g) { return g.transpose(g.input("a", {3, 4})); }, {{"a", {3, 4}}}},
      {"add", [](Graph& g) { return g.add(g.input("a", {3, 4}), g.input("b", {3, 4})); },
       {{"a", {3, 4}}, {"b", {3, 4}}}},
      {"mul", [](Graph& g) { return g.mul(g.input("a", {3, 4}), g.input("b", {3, 4})); },
       {{"a", {3, 4}}, {"b", {3, 4}}}},
      {"scale", [](Graph& g) { return g.scale(g.input("a", {2, 3}), -0.75); }, {{"a", {2, 3}}}},
      {"embedding_gather",
       [](Graph& g) { return g.embedding_gather(g.input("t", {5, 3}), {4, 0, 4, 2}); },
       {{"t", {5, 3}}}},
      {"rms_norm", [](Graph& g) { return g.rms_norm(g.input("x", {3, 4}), g.input("w", {4})); },
       {{"x", {3, 4}}, {"w", {4}}}},
      {"silu", [](Graph& g) { return g.silu(g.input("x", {3, 4})); }, {{"x", {3, 4}}}},
      {"softmax", [](Graph& g) { return g.softmax(g.input("x", {3, 5})); }, {{"x", {3, 5}}}},
      {"log_softmax", [](Graph& g) { return g.log_softmax(g.input("x", {3, 5})); }, {{"x", {3, 5}}}},
      {"index_gather", [](Graph& g) { return g.index_gather(g.input("x", {3, 5}), {1, 4, 0}); },
       {{"x", {3, 5}}}},
      {"sum", [](Graph& g) { return g.sum(g.input("x", {3, 4})); }, {{"x", {3, 4}}}},
      {"mean", [](Graph& g) { return g.mean(g.input("x", {3, 4})); }, {{"x", {3, 4}}}},
      {"causal_mask_add",
       [](Graph& g) { return g.softmax(g.causal_mask_add(g.input("x", {4, 4}))); },
       {{"x", {4, 4}}}},
      {"slice_rows", [](Graph& g) { return g.slice_rows(g.input("x", {4, 3}), 1, 2); },
       {{"x", {4, 3}}}},
      {"slice_cols", [](Graph& g) { return g.slice_cols(g.input("x", {3, 5}), 2, 3); },
       {{"x", {3, 5}}}},
      {"concat_cols",
       [](Graph& g) { return g.concat_cols({g.input("a", {3, 2}), g.input("b", {3, 3})}); },
       {{"a", {3, 2}}, {"b", {3, 3}}}},
  };
}

NamedTensors<double> random_inputs(const Case& c, std::mt19937_64& rng) {
  NamedTensors<double> out;
  for (const auto& [name, shape] : c.inputs) out.emplace(name, random_tensor(shape, rng));
  return out;
}

}  // namespace

TEST_CASE("evaluate: hand-computed primitive values") {
  Graph g;
  NodeId a = g.input("a", {2, 2}), b = g.input("b", {2, 1});
  NodeId m = g.matmul(a, b);
  NamedTensors<double> in{{"a", Tensor<double>({2, 2}, {1, 2, 3, 4})},
                          {"b", Tensor<double>({2, 1}, {1, 1})}};
  auto tr = evaluate(g, Bindings<double>(in));
  CHECK(tr.value(m) == Tensor<double>({2, 1}, {3, 7}));

  Graph gs;
  NodeId s = gs.softmax(gs.input("x", {2}));
  NamedTensors<double> zero{{"x", Tensor<double>({2}, {0, 0})}};
  auto ts = evaluate(gs, Bindings<double>(zero));
  CHECK(ts.value(s)[0] == 0.5);
  CHECK(ts.value(s)[1] == 0.5);
}

TEST_CASE("rms_norm of a constant vector is ~1 everywhere") {
  Graph g;
  NodeId y = g.rms_norm(g.input("x", {8}), g.input("w", {8}));
  NamedTensors<double> in{{"x", Tensor<double>({8}, Vector<double>::Constant(8, 2.0))},
                          {"w", Tensor<double>({8}, Vector<double>::Ones(8))}};
  auto tr = evaluate(g, Bindings<double>(in));
  // c / sqrt(c^2 + eps), computed directly
  const double expected = 2.0 / std::sqrt(4.0 + 1e-6);
  for (Index i = 0; i < 8; ++i) {
    CHECK(std::abs(tr.value(y)[i] - 1.0) < 1e-6);
    CHECK(tr.value(y)[i] == doctest::Approx(expected).epsilon(1e-15));
  }
}

TEST_CASE("backward: analytic gradients") {
  SUBCASE("x . x at 3") {
    Graph g;
    NodeId x = g.input("x", {});
    NodeId f = g.sum(g.mul(x, x));
    NamedTensors<double> in{{"x", Tensor<double>::scalar(3.0)}};
    auto grads = backward(evaluate(g, Bindings<double>(in)), f, {"x"});
    CHECK(grads.at("x").item() == 6.0);
  }
  SUBCASE("sum(W v) has rows equal to v") {
    Graph g;
    NodeId w = g.input("W", {3, 2}), v = g.input("v", {2, 1});
    NodeId f = g.sum(g.matmul(w, v));
    std::mt19937_64 rng(1);
    NamedTensors<double> in{{"W", random_tensor({3, 2}, rng)}, {"v", Tensor<double>({2, 1}, {1, 2})}};
    auto grads = backward(evaluate(g, Bindings<double>(in)), f, {"W"});
    for (Index r = 0; r < 3; ++r) {
      CHECK(grads.at("W")(r, 0) == 1.0);
      CHECK(grads.at("W")(r, 1) == 2.0);
    }
  }
}

TEST_CASE("backward: log-softmax gather loss matches central differences") {
  std::mt19937_64 rng(7);
  Graph g;
  NodeId logits = g.input("logits", {4, 7});
  NodeId loss = g.scale(g.sum(g.index_gather(g.log_softmax(logits), {3, 0, 6, 2})), -1.0);
  NamedTensors<double> in{{"logits", random_tensor({4, 7}, rng, 2.0)}};
  auto grads = backward(evaluate(g, Bindings<double>(in)), loss, {"logits"});
  auto f = [&](const NamedTensors<double>& p) {
    return evaluate(g, Bindings<double>(p)).value(loss).item();
  };
  CHECK(rel_err(grads.at("logits"), fd_gradient(f, in, "logits")) < 1e-4);
}

TEST_CASE("every primitive: vjp and jvp agree with finite differences and each other") {
  std::mt19937_64 rng(11);
  for (const Case& c : primitive_cases()) {
    CAPTURE(c.name);
    Graph g;
    NodeId out = c.build(g);
    const NamedTensors<double> x = random_inputs(c, rng);
    const NamedTensors<double> dir = random_inputs(c, rng);
    const Tensor<double> cot = random_tensor(g.node(out).shape, rng);
    std::set<std::string> wrt;
    for (const auto& [name, _] : c.inputs) wrt.insert(name);

    auto trace = jvp(g, Bindings<double>(x), Bindings<double>(dir));
    const Tensor<double> tangent = trace.tangent(out);
    CHECK(rel_err(tangent, fd_directional(g, out, x, dir)) < 1e-4);

    const NamedTensors<double> grads = vjp(trace, out, cot, wrt);
    auto projected = [&](const NamedTensors<double>& p) {
      return dot(evaluate(g, Bindings<double>(p)).value(out), cot);
    };
    for (const auto& name : wrt) {
      CAPTURE(name);
      CHECK(rel_err(grads.at(name), fd_gradient(projected, x, name)) < 1e-4);
    }

    const double lhs = dot(tangent, cot), rhs = dot(dir, grads);
    CHECK(std::abs(lhs - rhs) / (std::abs(lhs) + 1e-12) < 1e-8);
  }
}

TEST_CASE("jvp: analytic value, zero tangent, linearity") {
  SUBCASE("theta . theta at 2 along 1") {
    Graph g;
    NodeId t = g.input("theta", {});
    NodeId f = g.sum(g.mul(t, t));
    NamedTensors<double> base{{"theta", Tensor<double>::scalar(2.0)}};
    NamedTensors<double> d{{"theta", Tensor<double>::scalar(1.0)}};
    auto tr = jvp(g, Bindings<double>(base), Bindings<double>(d));
    CHECK(tr.dual(f).primal.item() == 4.0);
    CHECK(tr.dual(f).tangent.item() == 4.0);
  }
  SUBCASE("zero tangent is exactly zero on every primitive") {
    std::mt19937_64 rng(3);
    for (const Case& c : primitive_cases()) {
      CAPTURE(c.name);
      Graph g;
      NodeId out = c.build(g);
      NamedTensors<double> x = random_inputs(c, rng);
      NamedTensors<double> zero;
      for (const auto& [name, t] : x) zero.emplace(name, t.zeros_like());
      auto tr = jvp(g, Bindings<double>(x), Bindings<double>(zero));
      CHECK(tr.tangent(out).data().cwiseAbs().maxCoeff() == 0.0);
      CHECK(tr.value(out) == evaluate(g, Bindings<double>(x)).value(out));
    }
  }
  SUBCASE("tangent is linear in the direction") {
    std::mt19937_64 rng(5);
    for (const Case& c : primitive_cases()) {
      CAPTURE(c.name);
      Graph g;
      NodeId out = c.build(g);
      auto x = random_inputs(c, rng), d1 = random_inputs(c, rng), d2 = random_inputs(c, rng);
      const double a = 0.7, b = -1.3;
      NamedTensors<double> mix;
      for (const auto& [name, t] : d1)
        mix.emplace(name, Tensor<double>(t.shape(), a * t.data() + b * d2.at(name).data()));
      auto t1 = jvp(g, Bindings<double>(x), Bindings<double>(d1)).tangent(out);
      auto t2 = jvp(g, Bindings<double>(x), Bindings<double>(d2)).tangent(out);
      auto tm = jvp(g, Bindings<double>(x), Bindings<double>(mix)).tangent(out);
      const double diff = (tm.data() - (a * t1.data() + b * t2.data())).cwiseAbs().maxCoeff();
      CHECK(diff < 1e-10);
    }
  }
}

TEST_CASE("jvp: two-layer network against central differences") {
  std::mt19937_64 rng(21);
  Graph g;
  NodeId x = g.input("x", {5, 6});
  NodeId w1 = g.input("w1", {6, 8}), w2 = g.input("w2", {8, 3});
  NodeId out = g.log_softmax(g.matmul(g.silu(g.matmul(x, w1)), w2));
  NamedTensors<double> p{{"x", random_tensor({5, 6}, rng)},
                         {"w1", random_tensor({6, 8}, rng, 0.5)},
                         {"w2", random_tensor({8, 3}, rng, 0.5)}};
  NamedTensors<double> d{{"w1", random_tensor({6, 8}, rng)}, {"w2", random_tensor({8, 3}, rng)}};
  auto tr = jvp(g, Bindings<double>(p), Bindings<double>(d));
  CHECK(rel_err(tr.tangent(out), fd_directional(g, out, p, d)) < 1e-4);
}

TEST_CASE("vjp_at_base: linear map and zero cotangent") {
  Graph g;
  NodeId theta = g.input("theta", {1, 3}), x = g.input("x", {3, 1});
  NodeId f = g.matmul(theta, x);
  NamedTensors<double> in{{"theta", Tensor<double>({1, 3}, {0.3, -2, 5})},
                          {"x", Tensor<double>({3, 1}, {1, 2, 3})}};
  auto grads = vjp_at_base(g, Bindings<double>(in), f, Tensor<double>({1, 1}, {1.0}), {"theta"});
  CHECK(grads.at("theta") == Tensor<double>({1, 3}, {1, 2, 3}));
  auto zero = vjp_at_base(g, Bindings<double>(in), f, Tensor<double>({1, 1}), {"theta"});
  CHECK(zero.at("theta").data().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("errors: shapes, names, non-finite values") {
  Graph g;
  NodeId a = g.input("a", {2, 3});
  CHECK_THROWS_AS(g.matmul(a, a), ShapeError);
  CHECK_THROWS_AS(g.input("a", {1}), NameError);
  NodeId y = g.scale(g.scale(a, 1e200), 1e200);

  NamedTensors<double> wrong{{"a", Tensor<double>({3, 2})}};
  CHECK_THROWS_AS(evaluate(g, Bindings<double>(wrong)), ShapeError);
  CHECK_THROWS_AS(evaluate(g, Bindings<double>()), NameError);

  NamedTensors<double> ones{{"a", Tensor<double>({2, 3}, Vector<double>::Ones(6))}};
  try {
    evaluate(g, Bindings<double>(ones));
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.node() == y.index);
  }

  Graph h;
  NodeId b = h.input("b", {2});
  NodeId s = h.softmax(b);
  NamedTensors<double> in{{"b", Tensor<double>({2}, {1, 2})}};
  auto tr = evaluate(h, Bindings<double>(in));
  CHECK_THROWS_AS(backward(tr, s, {"b"}), ShapeError);
  CHECK_THROWS_AS(backward(tr, h.sum(b), {"b"}), NameError);  // node not in this trace
  CHECK_THROWS_AS(vjp(tr, s, Tensor<double>({3}), {"b"}), ShapeError);
  CHECK_THROWS_AS(vjp(tr, s, Tensor<double>({2}), {"nope"}), NameError);

  NamedTensors<double> bad_tangent{{"c", Tensor<double>({2})}};
  CHECK_THROWS_AS(jvp(h, Bindings<double>(in), Bindings<double>(bad_tangent)), NameError);
  NamedTensors<double> bad_shape{{"b", Tensor<double>({3})}};
  CHECK_THROWS_AS(jvp(h, Bindings<double>(in), Bindings<double>(bad_shape)), ShapeError);
}

TEST_CASE("replay is bit-identical and inputs are untouched") {
  std::mt19937_64 rng(9);
  for (const Case& c : primitive_cases()) {
    Graph g;
    NodeId out = c.build(g);
    const NamedTensors<double> x = random_inputs(c, rng);
    const NamedTensors<double> copy = x;
    auto r1 = evaluate(g, Bindings<double>(x));
    auto r2 = evaluate(g, Bindings<double>(x));
    CHECK(r1.value(out) == r2.value(out));
    CHECK(x == copy);
  }
}

TEST_CASE("float instantiation runs the same graph") {
  Graph g;
  NodeId s = g.softmax(g.input("x", {3}));
  NamedTensors<float> in{{"x", Tensor<float>({3}, {0.f, 0.f, 0.f})}};
  auto tr = evaluate(g, Bindings<float>(in));
  CHECK(tr.value(s)[1] == doctest::Approx(1.0 / 3.0));
}
