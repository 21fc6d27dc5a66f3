// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "dqa/error.hpp"
#include "dqa/tensor.hpp"
#include "support.hpp"

using namespace dqa;
using dqa::test::numeric_grad;
using dqa::test::random_tensor;
using dqa::test::rel_error;

namespace {

/// Gradient of sum(c ⊙ op(x)) wrt x, analytic and numeric.
template <typename Op>
double check_unary(Op op, Tensor x, Rng& rng) {
  const Tensor probe = [&] {
    Tape t;
    return op(t.leaf(x)).value();
  }();
  const Tensor c = random_tensor(probe.shape(), rng);
  auto loss = [&](const Tensor& v) {
    Tape t;
    Var y = op(t.leaf(v));
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * y.value()[i];
    return s;
  };
  Tape t;
  Var xv = t.leaf(x);
  Var out = sum(mul(op(xv), t.constant(c)));
  t.backward(out);
  const std::vector<double> analytic(xv.grad().begin(), xv.grad().end());
  return rel_error(analytic, numeric_grad(loss, x));
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
    Tensor t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK_FALSE(t.has_grad());
    CHECK(t.grad().size() == 6);
    CHECK(t.reshaped({3, 2}).dim(0) == 3);
    CHECK_THROWS_AS(t.reshaped({4}), DimensionError);
  }

  TEST_CASE("matmul fixtures and gradient") {
    Tape t;
    Var eye = t.constant(Tensor::matrix({{1, 0}, {0, 1}}));
    Var m = t.constant(Tensor::matrix({{1, 2}, {3, 4}}));
    CHECK(matmul(eye, m).value() == Tensor::matrix({{1, 2}, {3, 4}}));
    CHECK(matmul(t.constant(Tensor::matrix({{1, 2}})), t.constant(Tensor::matrix({{3}, {4}}))).value() ==
          Tensor::matrix({{11}}));
    CHECK_THROWS_WITH_AS(matmul(m, t.constant(Tensor({3, 1}))), doctest::Contains("[3x1]"), DimensionError);

    Rng rng(7);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 2}, rng);
    const Tensor c = random_tensor({3, 2}, rng);
    auto loss = [&](const Tensor& av, const Tensor& bv) {
      Tape tp;
      Var y = matmul(tp.constant(av), tp.constant(bv));
      double s = 0;
      for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * y.value()[i];
      return s;
    };
    Tape tp;
    Var av = tp.leaf(a), bv = tp.leaf(b);
    tp.backward(sum(mul(matmul(av, bv), tp.constant(c))));
    const auto na = numeric_grad([&](const Tensor& v) { return loss(v, b); }, a);
    const auto nb = numeric_grad([&](const Tensor& v) { return loss(a, v); }, b);
    CHECK(rel_error(std::vector<double>(av.grad().begin(), av.grad().end()), na) < 1e-6);
    CHECK(rel_error(std::vector<double>(bv.grad().begin(), bv.grad().end()), nb) < 1e-6);
  }

  TEST_CASE("elementwise ops") {
    Tape t;
    CHECK(relu(t.constant(Tensor::vector({-1, 0, 2}))).value() == Tensor::vector({0, 0, 2}));
    const Tensor x = Tensor::vector({0.5, -1.25, 3});
    CHECK(add(t.constant(x), t.constant(Tensor::vector({0}))).value() == x);
    CHECK_THROWS_AS(add(t.constant(x), t.constant(Tensor::vector({1, 2}))), DimensionError);

    Var a = t.leaf(Tensor::vector({2})), b = t.leaf(Tensor::vector({3}));
    t.backward(mul(a, b));
    CHECK(a.grad()[0] == 3.0);
    CHECK(b.grad()[0] == 2.0);

    Tape r;
    Var z = r.leaf(Tensor::vector({-1, 0, 2}));
    r.backward(sum(relu(z)));
    CHECK(z.grad()[0] == 0.0);
    CHECK(z.grad()[1] == 0.0);
    CHECK(z.grad()[2] == 1.0);
  }

  TEST_CASE("finite-difference property for every differentiable op") {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor x = random_tensor({3, 4}, rng);
      const Tensor y = random_tensor({3, 4}, rng);
      const Tensor bias = random_tensor({4}, rng);
      CHECK(check_unary([&](Var v) { return add(v, v.tape().constant(y)); }, x, rng) < 1e-5);
      CHECK(check_unary([&](Var v) { return sub(v.tape().constant(y), v); }, x, rng) < 1e-5);
      CHECK(check_unary([&](Var v) { return mul(v, v.tape().constant(y)); }, x, rng) < 1e-5);
      CHECK(check_unary([&](Var v) { return mul(v, v); }, x, rng) < 1e-5);
      CHECK(check_unary([&](Var v) { return scale(v, -1.7); }, x, rng) < 1e-5);
      CHECK(check_unary([&](Var v) { return add_bias(v, v.tape().constant(bias)); }, x, rng) < 1e-5);
      CHECK(check_unary([&](Var v) { return reshape(v, {2, 6}); }, x, rng) < 1e-5);
      CHECK(check_unary([&](Var v) { return add(v, v.tape().constant(Tensor::vector({0.3}))); }, x, rng) <
            1e-5);
      // Keep relu inputs away from the kink.
      Tensor xr = x;
      for (auto& v : xr.data())
        if (std::abs(v) < 1e-3) v = 0.5;
      CHECK(check_unary([&](Var v) { return relu(v); }, xr, rng) < 1e-5);
    }
  }

  TEST_CASE("conv2d forward and gradients") {
    Tape t;
    // 1×1×3×3 input, 1×1×2×2 kernel of ones: sums of 2×2 windows.
    Var x = t.constant(Tensor({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9}));
    Var k = t.constant(Tensor({1, 1, 2, 2}, 1.0));
    CHECK(conv2d(x, k).value() == Tensor({1, 1, 2, 2}, std::vector<double>{12, 16, 24, 28}));
    CHECK_THROWS_AS(conv2d(x, t.constant(Tensor({1, 2, 2, 2}))), DimensionError);

    Rng rng(5);
    const Tensor xi = random_tensor({2, 2, 5, 4}, rng);
    const Tensor wi = random_tensor({3, 2, 3, 3}, rng);
    CHECK(check_unary([&](Var v) { return conv2d(v, v.tape().constant(wi)); }, xi, rng) < 1e-5);
    CHECK(check_unary([&](Var v) { return conv2d(v.tape().constant(xi), v); }, wi, rng) < 1e-5);
    const Tensor b4 = random_tensor({3}, rng);
    const Tensor y4 = random_tensor({2, 3, 3, 2}, rng);
    CHECK(check_unary([&](Var v) { return add_bias(v, v.tape().constant(b4)); }, y4, rng) < 1e-5);
  }

  TEST_CASE("softmax cross-entropy") {
    Tape t;
    const std::vector<std::size_t> l0{0};
    CHECK(softmax_cross_entropy(t.constant(Tensor::matrix({{0, 0}})), l0).value()[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const double tiny = softmax_cross_entropy(t.constant(Tensor::matrix({{10, -10}})), l0).value()[0];
    CHECK(tiny == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
    CHECK(tiny == doctest::Approx(2.06e-9).epsilon(0.01));
    const std::vector<std::size_t> bad{2};
    CHECK_THROWS_AS(softmax_cross_entropy(t.constant(Tensor::matrix({{0, 0}})), bad), ValidationError);

    Rng rng(3);
    const Tensor logits = random_tensor({4, 3}, rng);
    const std::vector<std::size_t> labels{0, 2, 1, 2};
    auto f = [&](const Tensor& v) {
      Tape tp;
      return softmax_cross_entropy(tp.constant(v), labels).value()[0];
    };
    Tape tp;
    Var lv = tp.leaf(logits);
    tp.backward(softmax_cross_entropy(lv, labels));
    CHECK(rel_error(std::vector<double>(lv.grad().begin(), lv.grad().end()), numeric_grad(f, logits)) <
          1e-6);
  }

  TEST_CASE("straight-through node") {
    Tape t;
    Var w = t.leaf(Tensor::vector({0.3}));
    Var q = ste(w, Tensor::vector({0.333}), Tensor::vector({1}));
    CHECK(q.value()[0] == 0.333);
    t.backward(sum(q));
    CHECK(w.grad()[0] == 1.0);

    Tape t2;
    Var w2 = t2.leaf(Tensor::vector({0.3}));
    t2.backward(sum(ste(w2, Tensor::vector({0.333}), Tensor::vector({0}))));
    CHECK(w2.grad()[0] == 0.0);
    CHECK_THROWS_AS(ste(w2, Tensor::vector({1, 2}), Tensor::vector({1, 1})), DimensionError);
  }

  TEST_CASE("backward basics") {
    Tape t;
    Var w = t.leaf(Tensor::vector({1, 2, 3}));
    t.backward(sum(w));
    CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == std::vector<double>{1, 1, 1});

    Tape q;
    Var v = q.leaf(Tensor::vector({1, 2}));
    q.backward(scale(sum(mul(v, v)), 0.5));
    CHECK(std::vector<double>(v.grad().begin(), v.grad().end()) == std::vector<double>{1, 2});

    Tape n;
    Var m = n.leaf(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(n.backward(m), ValidationError);
  }

  TEST_CASE("each backward rule runs once") {
    Tape t;
    Var x = t.leaf(Tensor::vector({1, 2}));
    Var y = mul(x, x);       // shared input
    Var z = add(y, y);       // diamond
    Var s = sum(scale(z, 2));
    t.backward(s);
    // x is a leaf; y, z, scale, sum each have a rule.
    CHECK(t.rules_executed() == 4);
    CHECK(x.grad()[0] == doctest::Approx(8.0));
  }

  TEST_CASE("parameters accumulate into caller storage") {
    Tensor p = Tensor::vector({1, -1});
    for (int i = 0; i < 2; ++i) {
      Tape t;
      t.backward(sum(scale(t.parameter(p), 3.0)));
    }
    CHECK(p.grad()[0] == 6.0);
    p.zero_grad();
    CHECK(p.grad()[1] == 0.0);
  }

  TEST_CASE("forward is deterministic") {
    Rng r1(9), r2(9);
    const Tensor a = random_tensor({5, 5}, r1), b = random_tensor({5, 5}, r2);
    Tape t1, t2;
    CHECK(matmul(t1.constant(a), t1.constant(a)).value() == matmul(t2.constant(b), t2.constant(b)).value());
  }
}
