// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dqa/attention.hpp"
#include "dqa/binary_relax.hpp"
#include "dqa/error.hpp"
#include "support.hpp"

using namespace dqa;
using dqa::test::random_tensor;

TEST_SUITE("attention") {
  TEST_CASE("init_alpha") {
    const std::vector<int> b3{2, 4, 8};
    const auto a = init_alpha(b3);
    CHECK(a[0] == doctest::Approx(12.0 / 14).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(10.0 / 14).epsilon(1e-15));
    CHECK(a[2] == doctest::Approx(6.0 / 14).epsilon(1e-15));
    const std::vector<int> b2{1, 2};
    CHECK(init_alpha(b2)[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
    const std::vector<int> bad{4, 2};
    CHECK_THROWS_AS(init_alpha(bad), ValidationError);
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
      std::vector<int> bits;
      int cur = 0;
      for (int k = 0; k < 2 + static_cast<int>(rng.below(4)); ++k) bits.push_back(cur += 1 + static_cast<int>(rng.below(4)));
      const auto al = init_alpha(bits);
      CHECK(std::max_element(al.begin(), al.end()) == al.begin());
    }
  }

  TEST_CASE("normalize_alpha") {
    const std::vector<double> unit{1, -1};
    CHECK(normalize_alpha(unit) == unit);
    const std::vector<double> flat{0.4, 0.4, 0.4};
    CHECK(normalize_alpha(flat) == flat);
    const std::vector<double> a{12.0 / 14, 10.0 / 14, 6.0 / 14};
    const auto n = normalize_alpha(a);
    CHECK(n[0] == doctest::Approx(4.8107).epsilon(1e-4));
    CHECK(n[1] == doctest::Approx(4.00892).epsilon(1e-5));
    CHECK(n[2] == doctest::Approx(2.40535).epsilon(1e-5));
  }

  TEST_CASE("attention weights") {
    const std::vector<double> zero{0, 0, 0};
    for (double v : attention_weights(zero, 3.7)) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
    const std::vector<double> al{4.8, 4.0, 2.4};
    CHECK(attention_weights(al, 0.03)[0] > 1 - 1e-10);
    for (double v : attention_weights(al, 100)) CHECK(std::abs(v - 1.0 / 3) < 0.01);
    CHECK_THROWS_AS(attention_weights(al, 0.0), ValidationError);

    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> x(3);
      for (auto& v : x) v = rng.uniform(-5, 5);
      const auto w = attention_weights(x, rng.uniform(0.01, 10));
      CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
      for (double v : w) CHECK((v >= 0.0 && v <= 1.0));
    }
  }

  TEST_CASE("attention Jacobian matches finite differences") {
    Rng rng(6);
    const Tensor alpha = random_tensor({4}, rng);
    const Tensor c = random_tensor({4}, rng);
    Tape t;
    Var a = t.leaf(alpha);
    t.backward(sum(mul(attention_weights(a, 0.7), t.constant(c))));
    auto f = [&](const Tensor& x) {
      const auto w = attention_weights(x.data(), 0.7);
      double s = 0;
      for (std::size_t i = 0; i < 4; ++i) s += c[i] * w[i];
      return s;
    };
    CHECK(dqa::test::rel_error(std::vector<double>(a.grad().begin(), a.grad().end()),
                               dqa::test::numeric_grad(f, alpha)) < 1e-6);
  }

  TEST_CASE("mixing") {
    const Tensor q = Tensor::matrix({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
    const std::vector<double> onehot{0, 1, 0};
    CHECK(mix_quantized(q, onehot) == Tensor::vector({4, 5, 6}));
    const std::vector<double> half{0.5, 0.5};
    CHECK(mix_quantized(Tensor::matrix({{1, 1, 1}, {3, 3, 3}}), half) == Tensor::vector({2, 2, 2}));
    CHECK_THROWS_AS(mix_quantized(q, half), DimensionError);

    // d(c'q)/da_k == c'Q_k, and q stays inside the per-element hull.
    Rng rng(9);
    const Tensor rows = random_tensor({3, 5}, rng);
    const Tensor c = random_tensor({5}, rng);
    Tape t;
    Var a = t.leaf(Tensor::vector({0.2, 0.5, 0.3}));
    std::vector<Var> rv;
    for (std::size_t k = 0; k < 3; ++k)
      rv.push_back(t.constant(Tensor::vector(std::vector<double>(rows.data().begin() + 5 * k,
                                                                 rows.data().begin() + 5 * k + 5))));
    Var mixed = mix_quantized(a, rv);
    t.backward(sum(mul(mixed, t.constant(c))));
    for (std::size_t k = 0; k < 3; ++k) {
      double expect = 0;
      for (std::size_t j = 0; j < 5; ++j) expect += c[j] * rows[5 * k + j];
      CHECK(a.grad()[k] == doctest::Approx(expect).epsilon(1e-12));
    }
    for (std::size_t j = 0; j < 5; ++j) {
      const double lo = std::min({rows[j], rows[5 + j], rows[10 + j]});
      const double hi = std::max({rows[j], rows[5 + j], rows[10 + j]});
      CHECK(mixed.value()[j] >= lo - 1e-15);
      CHECK(mixed.value()[j] <= hi + 1e-15);
    }
  }

  TEST_CASE("regularizer") {
    const std::vector<double> g{1, 4, 16};
    const std::vector<double> one{1, 0, 0};
    CHECK(regularizer(one, g, 5, 100) == doctest::Approx(0.05).epsilon(1e-15));
    CHECK(regularizer(one, g, 0, 100) == 0.0);
    const std::vector<double> uni{1.0 / 3, 1.0 / 3, 1.0 / 3};
    CHECK(regularizer(uni, g, 1, 1) == doctest::Approx(7.0).epsilon(1e-15));
    const std::vector<double> two{0, 1, 0}, three{0, 0, 1};
    CHECK(regularizer(one, g, 2, 10) < regularizer(two, g, 2, 10));
    CHECK(regularizer(one, g, 2, 10) < regularizer(three, g, 2, 10));
    CHECK(default_penalties(3) == g);
    CHECK(default_penalties(2) == std::vector<double>{1, 4});
  }

  TEST_CASE("temperature schedule") {
    const auto s = TemperatureSchedule::make(100, 0.03, 1000);
    CHECK(s.at(0) == 100.0);
    CHECK(s.at(1000) == doctest::Approx(0.03).epsilon(1e-9));
    CHECK(s.at(500) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-9));
    bool overran = false;
    CHECK(s.at(1001, &overran) == 0.03);
    CHECK(overran);
    CHECK(derive_decay(100, 0.03, 1) == doctest::Approx(3e-4).epsilon(1e-12));
    CHECK(derive_decay(100, 0.03, 10000) == doctest::Approx(0.999189).epsilon(1e-6));
    CHECK(100 * std::pow(derive_decay(100, 0.03, 10000), 10000) == doctest::Approx(0.03).epsilon(1e-9));
    CHECK_THROWS_AS(derive_decay(1, 1, 10), ValidationError);
    CHECK_THROWS_AS(derive_decay(1, 2, 10), ValidationError);
    CHECK_THROWS_AS(derive_decay(1, 0.5, 0), ValidationError);
  }

  TEST_CASE("attention state validation") {
    CHECK_NOTHROW(AttentionState::make({2, 4, 8}, {}, 5, 10).validate());
    CHECK(AttentionState::make({2, 4, 8}, {}, 5, 10).penalties == std::vector<double>{1, 4, 16});
    CHECK_THROWS_AS(AttentionState::make({2, 8, 4}, {}, 5, 10), ValidationError);
    CHECK_THROWS_AS(AttentionState::make({2, 4}, {1, 2, 3}, 5, 10), DimensionError);
    CHECK_THROWS_AS(AttentionState::make({2, 4}, {}, -1, 10), ValidationError);
    CHECK_THROWS_AS(AttentionState::make({2, 4}, {}, 1, 0), ValidationError);
  }

  TEST_CASE("dqa layer forward limits") {
    Rng rng(12);
    const Tensor xin = random_tensor({4, 3}, rng);
    Tensor wt = random_tensor({3, 2}, rng);
    const std::vector<QuantizerSpec> specs{QuantizerSpec::minmax(2), QuantizerSpec::minmax(4),
                                           QuantizerSpec::minmax(8)};
    auto dense = [](Var x, Var q) { return matmul(x, q); };

    // Cold temperature with argmax 1 equals the plain 2-bit layer.
    auto state = AttentionState::make({2, 4, 8}, {}, 5, 6);
    Tape t;
    const auto out = dqa_layer_forward(t.constant(xin), t.constant(wt), specs, state, 1e-3, dense);
    Tape u;
    const auto q1 = quantize(wt, specs[0]).values;
    CHECK(out.output.value() == matmul(u.constant(xin), u.constant(q1)).value());
    CHECK(out.reg.value()[0] == doctest::Approx(5.0 / 6).epsilon(1e-12));

    // K = 1 is a plain fixed layer with a constant regularizer.
    auto single = AttentionState::make({2}, {}, 5, 6);
    const std::vector<QuantizerSpec> one{specs[0]};
    Tape s;
    const auto o1 = dqa_layer_forward(s.constant(xin), s.constant(wt), one, single, 0.5, dense);
    CHECK(o1.output.value() == matmul(u.constant(xin), u.constant(q1)).value());
    CHECK(o1.reg.value()[0] == doctest::Approx(5.0 / 6).epsilon(1e-15));

    // Training writes the normalized logits back.
    auto st = AttentionState::make({2, 4, 8}, {}, 5, 6);
    Tape tr;
    dqa_layer_forward(tr.constant(xin), tr.parameter(wt), specs, st, 1.0, dense, true);
    CHECK(st.alpha[0] == doctest::Approx(4.8107).epsilon(1e-4));
  }

  TEST_CASE("binary relax") {
    const std::vector<std::vector<double>> rows{{0}, {3}, {6}};
    CHECK(br_mix(rows, 4.0)[0] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(br_mix(rows, 1.0)[0] == doctest::Approx(3.0).epsilon(1e-15));
    const std::vector<std::vector<double>> r2{{1.25}, {3}, {6}};
    CHECK(std::abs(br_mix(r2, 1e6)[0] - 1.25) < 1e-5);
    const std::vector<std::vector<double>> ragged{{1}, {1, 2}};
    CHECK_THROWS_AS(br_mix(ragged, 1.0), DimensionError);
    CHECK_THROWS_AS(br_mix(rows, 0.0), ValidationError);

    double w = 1.0;
    for (int e = 0; e < 35; ++e) w = br_omega_update(w);
    CHECK(w == doctest::Approx(1.99989).epsilon(1e-5));
    for (int e = 35; e < 300; ++e) w = br_omega_update(w);
    CHECK(w == doctest::Approx(380.2).epsilon(1e-3));
    CHECK(br_weights(3, w)[0] == doctest::Approx(0.9948).epsilon(1e-4));
  }
}
