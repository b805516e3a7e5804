#include <doctest.h>

#include <algorithm>
#include <set>

#include "comvit/errors.hpp"
#include "comvit/gradcheck.hpp"
#include "comvit/ops.hpp"
#include "comvit/rng.hpp"
#include "comvit/tensor.hpp"
#include "support.hpp"

using namespace comvit;

TEST_CASE("tensor construction checks the element count") {
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), DimensionError);
  Tensor<double> t(Shape{2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 5.0);
  CHECK(t.dim(0) == 2);
  CHECK_THROWS_AS(t.at({2, 0}), IndexError);
  CHECK_THROWS_AS(t.item(), DimensionError);
}

TEST_CASE("backward of sum of squares") {
  Tensor<double> x(Shape{3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(mul(x, x)));
  REQUIRE(x.has_grad());
  CHECK(test::to_vector(Tensor<double>(Shape{3}, std::vector<double>(x.grad().begin(), x.grad().end()))) ==
        std::vector<double>{2, 4, 6});
}

TEST_CASE("gradients accumulate across two uses of one tensor") {
  Rng rng(3);
  Tensor<double> a = test::random_tensor({3, 4}, rng);
  Tensor<double> b = test::random_tensor({4, 2}, rng);
  a.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  // loss = sum(a b) + sum(a ⊙ a)
  tape.backward(add(sum(matmul(a, b)), sum(mul(a, a))));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t t = 0; t < 4; ++t) {
      const double row_b = b.at({t, 0}) + b.at({t, 1});
      CHECK(a.grad()[i * 4 + t] == doctest::Approx(row_b + 2 * a.at({i, t})).epsilon(1e-12));
    }
  }
}

TEST_CASE("constant inputs receive no gradient and are not recorded") {
  Tensor<double> c(Shape{2}, std::vector<double>{1, 2});
  Tensor<double> x(Shape{2}, std::vector<double>{3, 4});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  const Tensor<double> constant_only = sum(mul(c, c));
  CHECK(tape.size() == 0);
  tape.backward(sum(mul(x, c)));
  CHECK_FALSE(c.has_grad());
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("backward misuse raises typed errors") {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), DimensionError);
  const Tensor<double> loss = sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), StateError);
  tape.reset();
  CHECK(tape.size() == 0);
}

TEST_CASE("finite_diff_check on analytic functions") {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2});
  const auto quad = finite_diff_check([](const Tensor<double>& v) { return sum(mul(v, v)); }, x, 1e-5);
  CHECK(quad.max_rel_error < 1e-8);
  CHECK(quad.probes == 2);

  Rng rng(11);
  Tensor<double> a = test::random_tensor({3, 3}, rng);
  Tensor<double> b = test::random_tensor({3, 3}, rng);
  const auto mm = finite_diff_check([&](const Tensor<double>& v) { return sum(matmul(v, b)); }, a);
  CHECK(mm.max_rel_error < 1e-6);
}

TEST_CASE("finite_diff_check rejects non-finite probes") {
  Tensor<double> x(Shape{1}, std::vector<double>{0.0});
  CHECK_THROWS_AS(finite_diff_check([](const Tensor<double>& v) { return sum(reciprocal(v)); }, x), NumericalError);
}

TEST_CASE("rng is reproducible and restorable") {
  Rng a(99), b(99);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  const Rng::State saved = a.state();
  const double u = a.uniform();
  a.restore(saved);
  CHECK(a.uniform() == u);
  Rng c(100);
  CHECK(c.next_u64() != Rng(99).next_u64());
}

TEST_CASE("rng distributions have the expected moments") {
  Rng rng(5);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0, sb = 0;
  double tmax = 0;
  for (int i = 0; i < n; ++i) {
    su += rng.uniform();
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
    sb += rng.beta(0.8, 0.8);
    tmax = std::max(tmax, std::abs(rng.truncated_normal(0.02)));
  }
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(sn / n) < 0.01);
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.02));
  CHECK(sb / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(tmax <= 0.04);
}

TEST_CASE("rng below is unbiased over a small range and shuffle permutes") {
  Rng rng(8);
  std::vector<int> counts(3, 0);
  for (int i = 0; i < 30000; ++i) ++counts[rng.below(3)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 400);
  std::vector<int> items{0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(std::span(items));
  CHECK(std::set<int>(items.begin(), items.end()).size() == 8);
}
