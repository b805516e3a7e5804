#include <doctest.h>

#include <cmath>
#include <limits>

#include "comvit/errors.hpp"
#include "comvit/gradcheck.hpp"
#include "comvit/nn.hpp"
#include "comvit/ops.hpp"
#include "support.hpp"

using namespace comvit;

namespace {

std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                const Conv2DSpec& s) {
  const std::size_t batch = x.dim(0), c_in = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t ho = s.output_extent(h), wo = s.output_extent(wd);
  std::vector<double> out(batch * s.out_channels * ho * wo);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < s.out_channels; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double acc = b.data()[o];
          for (std::size_t c = 0; c < c_in; ++c)
            for (std::size_t ki = 0; ki < s.kernel; ++ki)
              for (std::size_t kj = 0; kj < s.kernel; ++kj) {
                const long y = static_cast<long>(i * s.stride + ki) - static_cast<long>(s.padding);
                const long xx = static_cast<long>(j * s.stride + kj) - static_cast<long>(s.padding);
                if (y < 0 || xx < 0 || y >= static_cast<long>(h) || xx >= static_cast<long>(wd)) continue;
                acc += x.at({n, c, std::size_t(y), std::size_t(xx)}) * w.at({o, c, ki, kj});
              }
          out[((n * s.out_channels + o) * ho + i) * wo + j] = acc;
        }
  return out;
}

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("conv2d identity and summation kernels") {
  Rng rng(1);
  auto x = test::random_tensor({1, 1, 4, 4}, rng);
  Tensor<double> one(Shape{1, 1, 1, 1}, 1.0), zero(Shape{1}, 0.0);
  CHECK(test::to_vector(conv2d(x, one, zero, {1, 1, 1, 1, 0})) == test::to_vector(x));

  Tensor<double> ones(Shape{1, 1, 5, 5}, 1.0), box(Shape{1, 1, 3, 3}, 1.0);
  const auto y = conv2d(ones, box, zero, {1, 1, 3, 1, 0});
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (double v : y.data()) CHECK(v == 9.0);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(2);
  for (Conv2DSpec spec : {Conv2DSpec{3, 4, 3, 1, 1}, Conv2DSpec{3, 2, 7, 2, 3}, Conv2DSpec{3, 5, 2, 3, 0}}) {
    auto x = test::random_tensor({2, 3, 9, 9}, rng);
    auto w = test::random_tensor({spec.out_channels, 3, spec.kernel, spec.kernel}, rng);
    auto b = test::random_tensor({spec.out_channels}, rng);
    CHECK(test::max_abs_diff(conv2d(x, w, b, spec), conv_oracle(x, w, b, spec)) < 1e-5);
  }
  Tensor<double> x(Shape{1, 2, 5, 5}), w(Shape{1, 3, 3, 3}), b(Shape{1});
  CHECK_THROWS_AS(conv2d(x, w, b, {3, 1, 3, 1, 0}), DimensionError);
}

TEST_CASE("output extents follow the floor formula") {
  for (std::size_t in : {7u, 8u, 9u, 16u, 224u})
    for (std::size_t k : {1u, 3u, 7u})
      for (std::size_t s : {1u, 2u, 3u})
        for (std::size_t p : {0u, 1u, 3u}) {
          if (in + 2 * p < k) continue;
          const std::size_t expected = (in + 2 * p - k) / s + 1;
          CHECK(Conv2DSpec{1, 1, k, s, p}.output_extent(in) == expected);
          if (p <= k / 2) CHECK(PoolSpec{k, s, p}.output_extent(in) == expected);
        }
  CHECK(PoolSpec{3, 2, 1}.output_extent(224) == 112);
  CHECK_THROWS_AS(Conv2DSpec(1, 1, 7, 1, 0).output_extent(3), DimensionError);
}

TEST_CASE("maxpool2d") {
  Tensor<double> constant(Shape{1, 1, 6, 6}, 2.5);
  const auto pooled = maxpool2d(constant, {3, 2, 1});
  for (double v : pooled.data()) CHECK(v == 2.5);

  Rng rng(3);
  auto x = test::random_tensor({1, 1, 8, 8}, rng);
  const PoolSpec spec{3, 2, 1};
  const auto y = maxpool2d(x, spec);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      for (long di = 0; di < 3; ++di)
        for (long dj = 0; dj < 3; ++dj) {
          const long r = long(i) * 2 + di - 1, c = long(j) * 2 + dj - 1;
          if (r >= 0 && c >= 0 && r < 8 && c < 8) best = std::max(best, x.at({0, 0, std::size_t(r), std::size_t(c)}));
        }
      CHECK(y.at({0, 0, i, j}) == best);
    }
}

TEST_CASE("maxpool2d routes ties to the first maximum") {
  Tensor<double> x(Shape{1, 1, 2, 2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(maxpool2d(x, {2, 2, 0})));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("layer_norm") {
  Tensor<double> constant(Shape{5}, 3.0), gamma(Shape{5}, 1.0), beta(Shape{5}, 0.0);
  const auto normed = layer_norm(constant, gamma, beta);
  for (double v : normed.data()) CHECK(v == 0.0);

  Rng rng(4);
  auto x = test::random_tensor({3, 16}, rng, -4, 4);
  Tensor<double> g16(Shape{16}, 1.0), b16(Shape{16}, 0.0);
  const auto y = layer_norm(x, g16, b16);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += y.at({r, i});
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += (y.at({r, i}) - m) * (y.at({r, i}) - m);
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v / 16 - 1.0) < 1e-5);
  }
  const auto check = finite_diff_check([&](const Tensor<double>& v) { return sum(mul(layer_norm(v, g16, b16), x)); },
                                       test::random_tensor({3, 16}, rng), 1e-5);
  CHECK(check.max_rel_error < 1e-6);
}

TEST_CASE("gelu uses the exact normal CDF") {
  Tensor<double> x(Shape{3}, std::vector<double>{0.0, 10.0, 1.0});
  const auto y = gelu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(std::abs(y.data()[1] - 10.0) < 1e-6);
  CHECK(y.data()[2] == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(y.data()[2] == doctest::Approx(phi(1.0)).epsilon(1e-14));
}

TEST_CASE("drop_path") {
  Rng rng(5);
  auto x = test::random_tensor({4, 3}, rng);
  CHECK(test::to_vector(drop_path(x, 0.0, true, &rng)) == test::to_vector(x));
  CHECK(test::to_vector(drop_path(x, 0.5, false, &rng)) == test::to_vector(x));
  CHECK_THROWS_AS(drop_path(x, 1.0, true, &rng), ConfigError);
  CHECK_THROWS_AS(drop_path(x, -0.1, true, &rng), ConfigError);

  SUBCASE("keep fraction and expectation over 1e5 samples") {
    const std::size_t n = 100000;
    Tensor<double> ones(Shape{n, 2}, 1.0);
    const auto y = drop_path(ones, 0.1, true, &rng);
    std::size_t kept = 0;
    double total = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const double v = y.at({b, 0});
      CHECK_MESSAGE((v == 0.0 || std::abs(v - 1.0 / 0.9) < 1e-12), "sample " << b);
      CHECK(y.at({b, 1}) == v);  // one draw per sample
      kept += v != 0.0;
      total += v;
    }
    CHECK(std::abs(double(kept) / n - 0.9) < 0.01);
    CHECK(std::abs(total / n - 1.0) < 0.02);
  }
}
