#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "fgl/graph.hpp"

using namespace fgl;

namespace {

Tensor make(Shape s, std::initializer_list<double> v) {
  Tensor t(s);
  size_t i = 0;
  for (double x : v) t.data[i++] = x;
  REQUIRE(i == t.data.size());
  return t;
}

}  // namespace

TEST_CASE("exact small-case identities") {
  Graph g;
  NodeId a = g.leaf("a", Shape{2, 2});
  NodeId b = g.leaf("b", Shape{2, 2});
  NodeId mm = g.matmul(a, b);
  NodeId tr = g.transpose(a);

  Tensor ta = make(Shape{2, 2}, {1, 2, 3, 4});
  Tensor tb = make(Shape{2, 2}, {5, 6, 7, 8});
  Bindings bind{{"a", &ta}, {"b", &tb}};

  Tape tape(g);
  tape.forward(bind, tr);
  CHECK(tape.value(tr).at(0, 0) == 1.0);
  CHECK(tape.value(tr).at(0, 1) == 3.0);
  CHECK(tape.value(tr).at(1, 0) == 2.0);
  CHECK(tape.value(tr).at(1, 1) == 4.0);

  Tensor out = forward(g, bind, mm);
  CHECK(out.at(0, 0) == 19.0);
  CHECK(out.at(0, 1) == 22.0);
  CHECK(out.at(1, 0) == 43.0);
  CHECK(out.at(1, 1) == 50.0);
}

TEST_CASE("softmax, layernorm, gelu forward values") {
  Graph g;
  NodeId x = g.leaf("x", Shape{1, 3});
  NodeId sm = g.softmax(x);
  NodeId ln = g.layernorm(x);
  Tensor tx = make(Shape{1, 3}, {1, 2, 3});
  Bindings bind{{"x", &tx}};

  Tape tape(g);
  tape.forward(bind, ln);
  CHECK(tape.value(sm).at(0) == doctest::Approx(0.09003057317038046).epsilon(1e-14));
  CHECK(tape.value(sm).at(1) == doctest::Approx(0.24472847105479764).epsilon(1e-14));
  CHECK(tape.value(sm).at(2) == doctest::Approx(0.6652409557748218).epsilon(1e-14));
  CHECK(tape.value(ln).at(0) == doctest::Approx(-1.2247356859083902).epsilon(1e-14));
  CHECK(tape.value(ln).at(1) == doctest::Approx(0.0));
  CHECK(tape.value(ln).at(2) == doctest::Approx(1.2247356859083902).epsilon(1e-14));

  Graph g2;
  NodeId y = g2.leaf("y", Shape{3});
  NodeId ge = g2.gelu(y);
  Tensor ty = make(Shape{3}, {-1.0, 0.5, 2.0});
  Bindings bind2{{"y", &ty}};
  Tensor out = forward(g2, bind2, ge);
  CHECK(out.at(0) == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  CHECK(out.at(1) == doctest::Approx(0.34573123063700656).epsilon(1e-14));
  CHECK(out.at(2) == doctest::Approx(1.9544997361036416).epsilon(1e-14));
}

TEST_CASE("layernorm on a constant row returns exact zeros") {
  Graph g;
  NodeId x = g.leaf("x", Shape{2, 3});
  NodeId ln = g.layernorm(x);
  Tensor tx = make(Shape{2, 3}, {5, 5, 5, 1, 2, 3});
  Bindings bind{{"x", &tx}};
  Tensor out = forward(g, bind, ln);
  CHECK(out.at(0, 0) == 0.0);
  CHECK(out.at(0, 1) == 0.0);
  CHECK(out.at(0, 2) == 0.0);
  CHECK(out.at(1, 2) > 0.0);
}

TEST_CASE("gradient of a pure linear graph is exact to 1e-9") {
  Graph g;
  NodeId a = g.leaf("a", Shape{3, 2});
  NodeId b = g.leaf("b", Shape{3, 2});
  NodeId y = g.sum(g.add(g.scalar_mul(a, 2.5), g.sub(b, a)));

  Rng rng(7);
  Tensor ta = Tensor::randn(Shape{3, 2}, rng);
  Tensor tb = Tensor::randn(Shape{3, 2}, rng);
  Bindings bind{{"a", &ta}, {"b", &tb}};
  CHECK(grad_check(g, bind, y, 1e-4) < 1e-9);

  auto grads = backward(g, bind, y);
  for (double v : grads["a"].data) CHECK(v == doctest::Approx(1.5).epsilon(1e-12));
  for (double v : grads["b"].data) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gradient of softmax+matmul chain matches finite differences") {
  Graph g;
  NodeId a = g.leaf("a", Shape{3, 4});
  NodeId b = g.leaf("b", Shape{4, 3});
  NodeId y = g.sum(g.mul(g.softmax(g.matmul(a, b)), g.matmul(a, b)));

  Rng rng(0);
  Tensor ta = Tensor::randn(Shape{3, 4}, rng);
  Tensor tb = Tensor::randn(Shape{4, 3}, rng);
  Bindings bind{{"a", &ta}, {"b", &tb}};
  CHECK(grad_check(g, bind, y, 1e-5) < 1e-4);
}

TEST_CASE("gradient of a deep composite graph matches finite differences") {
  // miniature transformer-ish block: layernorm -> matmul -> gelu -> matmul,
  // then frobenius / mean / sqerr mixing
  Graph g;
  NodeId x = g.leaf("x", Shape{4, 6});
  NodeId w1 = g.leaf("w1", Shape{6, 8});
  NodeId b1 = g.leaf("b1", Shape{1, 8});
  NodeId w2 = g.leaf("w2", Shape{8, 6});
  NodeId tgt = g.leaf("tgt", Shape{4, 6});

  NodeId h = g.matmul(g.layernorm(x), w1);
  h = g.add(h, g.repeat_rows(b1, 4));
  h = g.gelu(h);
  NodeId o = g.matmul(h, w2);
  NodeId loss = g.add(g.mean(g.sqerr(o, tgt)), g.scalar_mul(g.frob(o), 0.01));

  Rng rng(0);
  Tensor tx = Tensor::randn(Shape{4, 6}, rng);
  Tensor tw1 = Tensor::randn(Shape{6, 8}, rng, 0.5);
  Tensor tb1 = Tensor::randn(Shape{1, 8}, rng, 0.3);
  Tensor tw2 = Tensor::randn(Shape{8, 6}, rng, 0.5);
  Tensor ttgt = Tensor::randn(Shape{4, 6}, rng);
  Bindings bind{{"x", &tx}, {"w1", &tw1}, {"b1", &tb1}, {"w2", &tw2}, {"tgt", &ttgt}};
  CHECK(grad_check(g, bind, loss, 1e-5) < 1e-4);
}

TEST_CASE("gradients of div, exp, minimum, clamp, concat, slice match finite differences") {
  Graph g;
  NodeId a = g.leaf("a", Shape{2, 3});
  NodeId b = g.leaf("b", Shape{2, 3});
  NodeId r = g.divide(g.exp(g.scalar_mul(a, 0.3)), g.add(g.mul(b, b), g.exp(b)));
  NodeId m = g.minimum(r, g.clamp(b, -0.5, 0.5));
  NodeId cat = g.concat_last(m, r);
  NodeId sl = g.slice(cat, 1, 1, 4);
  NodeId y = g.sum(sl);

  Rng rng(3);
  Tensor ta = Tensor::randn(Shape{2, 3}, rng);
  Tensor tb = Tensor::randn(Shape{2, 3}, rng);
  // keep entries away from clamp kinks and min ties so FD is two-sided smooth
  for (auto& v : tb.data)
    if (std::abs(std::abs(v) - 0.5) < 0.05) v += 0.1;
  Bindings bind{{"a", &ta}, {"b", &tb}};
  CHECK(grad_check(g, bind, y, 1e-6) < 1e-4);
}

TEST_CASE("sqrt forward value and gradient") {
  Graph g;
  NodeId a = g.leaf("a", Shape{1, 3});
  NodeId y = g.sum(g.sqrt(g.add(g.mul(a, a), g.exp(a))));
  Tensor ta(Shape{1, 3});
  ta.data = {0.2, -0.7, 1.9};
  Bindings bind{{"a", &ta}};
  Tape tape(g);
  // hand value: sum over k of sqrt(a_k^2 + exp(a_k))
  double want = 0.0;
  for (double v : ta.data) want += std::sqrt(v * v + std::exp(v));
  CHECK(tape.forward(bind, y).value() == doctest::Approx(want).epsilon(1e-15));
  CHECK(grad_check(g, bind, y, 1e-6) < 1e-4);

  // exact perfect squares stay exact, and sqrt(0) has zero subgradient
  Graph g2;
  NodeId b = g2.leaf("b", Shape{1, 2});
  NodeId y2 = g2.sum(g2.sqrt(b));
  Tensor tb(Shape{1, 2});
  tb.data = {1024.0, 0.0};
  Bindings bind2{{"b", &tb}};
  Tape t2(g2);
  CHECK(t2.forward(bind2, y2).value() == 32.0);
  t2.backward(y2);
  CHECK(t2.grad(b).at(0, 1) == 0.0);
  CHECK(t2.grad(b).at(0, 0) == doctest::Approx(0.5 / 32.0).epsilon(1e-15));
}

TEST_CASE("rank-3 elementwise ops and slicing") {
  Graph g;
  NodeId a = g.leaf("a", Shape{2, 3, 4});
  NodeId s = g.slice(a, 0, 1, 1);   // (1,3,4)
  NodeId s2 = g.slice(s, 2, 1, 2);  // (1,3,2)
  NodeId y = g.sum(g.mul(s2, s2));

  Rng rng(11);
  Tensor ta = Tensor::randn(Shape{2, 3, 4}, rng);
  Bindings bind{{"a", &ta}};
  CHECK(grad_check(g, bind, y, 1e-5) < 1e-6);

  Tensor out = forward(g, bind, s2);
  CHECK(out.shape == Shape{1, 3, 2});
  CHECK(out.at(0) == ta.data[12 + 1]);
}

TEST_CASE("frobenius norm value and zero-input subgradient") {
  Graph g;
  NodeId a = g.leaf("a", Shape{1, 2});
  NodeId y = g.frob(a);
  Tensor ta = make(Shape{1, 2}, {3, 4});
  Bindings bind{{"a", &ta}};
  CHECK(forward(g, bind, y).value() == doctest::Approx(5.0).epsilon(1e-15));
  auto grads = backward(g, bind, y);
  CHECK(grads["a"].at(0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(grads["a"].at(1) == doctest::Approx(0.8).epsilon(1e-12));

  Tensor tz = make(Shape{1, 2}, {0, 0});
  Bindings bind2{{"a", &tz}};
  auto gz = backward(g, bind2, y);
  CHECK(gz["a"].at(0) == 0.0);
  CHECK(gz["a"].at(1) == 0.0);
}

TEST_CASE("shape and binding errors throw") {
  Graph g;
  NodeId a = g.leaf("a", Shape{2, 3});
  NodeId b = g.leaf("b", Shape{3, 2});
  CHECK_THROWS_AS((void)g.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS((void)g.matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS((void)g.slice(a, 0, 1, 5), std::invalid_argument);
  CHECK_THROWS_AS((void)g.slice(a, 2, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)g.leaf("a", Shape{1}), std::invalid_argument);
  CHECK_THROWS_AS((void)g.repeat_rows(a, 4), std::invalid_argument);

  NodeId y = g.sum(a);
  Tensor ta(Shape{2, 3});
  Bindings missing;
  CHECK_THROWS_AS((void)forward(g, missing, y), std::invalid_argument);
  Tensor wrong(Shape{3, 2});
  Bindings bad{{"a", &wrong}, {"b", &wrong}};
  CHECK_THROWS_AS((void)forward(g, bad, y), std::invalid_argument);
  Tensor tb(Shape{3, 2});
  Bindings ok{{"a", &ta}, {"b", &tb}};
  CHECK_NOTHROW((void)forward(g, ok, y));
  // backward on a non-scalar without a seed gradient is an error
  CHECK_THROWS_AS((void)backward(g, ok, a), std::invalid_argument);
}

TEST_CASE("forward and backward are bitwise deterministic") {
  Graph g;
  NodeId a = g.leaf("a", Shape{5, 5});
  NodeId b = g.leaf("b", Shape{5, 5});
  NodeId y = g.mean(g.gelu(g.matmul(g.softmax(a), g.layernorm(b))));

  Rng rng(42);
  Tensor ta = Tensor::randn(Shape{5, 5}, rng);
  Tensor tb = Tensor::randn(Shape{5, 5}, rng);
  Bindings bind{{"a", &ta}, {"b", &tb}};

  Tensor v1 = forward(g, bind, y);
  Tensor v2 = forward(g, bind, y);
  CHECK(v1.value() == v2.value());
  auto g1 = backward(g, bind, y);
  auto g2 = backward(g, bind, y);
  for (size_t i = 0; i < g1["a"].data.size(); i++) CHECK(g1["a"].data[i] == g2["a"].data[i]);
}

TEST_CASE("repeat_rows forward and gradient") {
  Graph g;
  NodeId a = g.leaf("a", Shape{1, 3});
  NodeId r = g.repeat_rows(a, 4);
  NodeId y = g.sum(g.mul(r, r));
  Tensor ta = make(Shape{1, 3}, {1, -2, 0.5});
  Bindings bind{{"a", &ta}};
  Tensor out = forward(g, bind, r);
  CHECK(out.shape == Shape{4, 3});
  CHECK(out.at(3, 1) == -2.0);
  CHECK(grad_check(g, bind, y, 1e-6) < 1e-8);
}
