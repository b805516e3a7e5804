#include "comvit/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "comvit/gradcheck.hpp"
#include "comvit/nn.hpp"
#include "comvit/ops.hpp"
#include "comvit/rng.hpp"

namespace comvit {

namespace {

using T = double;

Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (T& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// sum(r * y) with a fixed random projection, so every output coordinate matters
Tensor<T> project(const Tensor<T>& y, const Tensor<T>& r) { return sum(mul(y, r)); }

std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

struct Case {
  Tensor<T> x;
  std::function<Tensor<T>(const Tensor<T>&)> op;
};

class Checker {
 public:
  explicit Checker(std::string name) : report_{std::move(name), 0, 0.0, 1e-6} {}

  void run(const Case& c, Rng& rng, double eps = 1e-5) {
    // output shape decides the projection
    const Tensor<T> y = c.op(c.x);
    const Tensor<T> r = random_tensor(y.shape(), rng);
    auto f = [&](const Tensor<T>& x) { return project(c.op(x), r); };
    const GradCheckResult res = finite_diff_check(f, c.x, eps);
    report_.max_error = std::max(report_.max_error, res.max_rel_error);
    ++report_.cases;
  }
  GradCheckReport report() const { return report_; }

 private:
  GradCheckReport report_;
};

}  // namespace

std::vector<GradCheckReport> primitive_gradchecks(std::uint64_t seed, std::size_t cases) {
  Rng rng(seed);
  std::vector<GradCheckReport> reports;
  auto suite = [&](const std::string& name, const std::function<Case(Rng&)>& make, double eps = 1e-5) {
    Checker checker(name);
    for (std::size_t i = 0; i < cases; ++i) checker.run(make(rng), rng, eps);
    reports.push_back(checker.report());
  };

  suite("matmul.a", [](Rng& g) {
    const std::size_t m = extent(g, 1, 5), k = extent(g, 1, 5), n = extent(g, 1, 5), b = extent(g, 1, 3);
    Tensor<T> w = random_tensor({k, n}, g);
    return Case{random_tensor({b, m, k}, g), [w](const Tensor<T>& x) { return matmul(x, w); }};
  });
  suite("matmul.b", [](Rng& g) {
    const std::size_t m = extent(g, 1, 5), k = extent(g, 1, 5), n = extent(g, 1, 5);
    Tensor<T> a = random_tensor({m, k}, g);
    return Case{random_tensor({k, n}, g), [a](const Tensor<T>& x) { return matmul(a, x); }};
  });
  suite("matmul.batched", [](Rng& g) {
    const std::size_t b = extent(g, 1, 3), m = extent(g, 1, 4), k = extent(g, 1, 4), n = extent(g, 1, 4);
    Tensor<T> a = random_tensor({b, m, k}, g);
    Tensor<T> c = random_tensor({b, k, n}, g);
    const bool wrt_a = g.bernoulli(0.5);
    if (wrt_a) return Case{a, [c](const Tensor<T>& x) { return matmul(x, c); }};
    return Case{c, [a](const Tensor<T>& x) { return matmul(a, x); }};
  });
  suite("add", [](Rng& g) {
    const std::size_t b = extent(g, 1, 3), n = extent(g, 1, 5);
    Tensor<T> bias = random_tensor({n}, g);
    Tensor<T> other = random_tensor({b, n}, g);
    if (g.bernoulli(0.5)) return Case{random_tensor({b, n}, g), [bias](const Tensor<T>& x) { return add(x, bias); }};
    return Case{random_tensor({n}, g), [other](const Tensor<T>& x) { return add(other, x); }};
  });
  suite("mul", [](Rng& g) {
    const std::size_t b = extent(g, 1, 3), n = extent(g, 1, 5);
    Tensor<T> row = random_tensor({n}, g);
    Tensor<T> other = random_tensor({b, n}, g);
    if (g.bernoulli(0.5)) return Case{random_tensor({b, n}, g), [row](const Tensor<T>& x) { return mul(x, row); }};
    return Case{random_tensor({n}, g), [other](const Tensor<T>& x) { return mul(other, x); }};
  });
  suite("mul_axis", [](Rng& g) {
    const Shape shape{extent(g, 1, 3), extent(g, 1, 3), extent(g, 1, 3)};
    const std::size_t axis = g.below(3);
    Tensor<T> s = random_tensor({shape[axis]}, g);
    Tensor<T> x = random_tensor(shape, g);
    if (g.bernoulli(0.5)) return Case{x, [s, axis](const Tensor<T>& v) { return mul_axis(v, s, axis); }};
    return Case{s, [x, axis](const Tensor<T>& v) { return mul_axis(x, v, axis); }};
  });
  suite("scale", [](Rng& g) {
    const T c = g.uniform(-2, 2);
    return Case{random_tensor({extent(g, 1, 6)}, g), [c](const Tensor<T>& x) { return scale(x, c); }};
  });
  suite("shift", [](Rng& g) {
    const T c = g.uniform(-2, 2);
    return Case{random_tensor({extent(g, 1, 6)}, g), [c](const Tensor<T>& x) { return shift(x, c); }};
  });
  suite("relu", [](Rng& g) {
    return Case{random_tensor({extent(g, 1, 4), extent(g, 1, 4)}, g), [](const Tensor<T>& x) { return relu(x); }};
  });
  suite("softplus", [](Rng& g) {
    return Case{random_tensor({extent(g, 1, 6)}, g, -4, 4), [](const Tensor<T>& x) { return softplus(x); }};
  });
  suite("reciprocal", [](Rng& g) {
    Tensor<T> x = random_tensor({extent(g, 1, 6)}, g, 0.5, 2.0);
    for (T& v : x.mutable_data()) v = g.bernoulli(0.5) ? v : -v;
    return Case{x, [](const Tensor<T>& v) { return reciprocal(v); }};
  });
  suite("softmax_lastdim", [](Rng& g) {
    const std::size_t cols = extent(g, 2, 6);
    const bool masked = g.bernoulli(0.5);
    Tensor<T> mask(Shape{cols, cols});
    if (masked) {
      for (std::size_t i = 0; i < cols; ++i) mask.mutable_data()[i * cols + i] = -std::numeric_limits<T>::infinity();
    }
    return Case{random_tensor({cols, cols}, g, -3, 3),
                [mask](const Tensor<T>& x) { return softmax_lastdim(add(x, mask)); }};
  });
  suite("reshape", [](Rng& g) {
    const std::size_t a = extent(g, 1, 4), b = extent(g, 1, 4);
    return Case{random_tensor({a, b}, g), [a, b](const Tensor<T>& x) { return reshape(x, Shape{b, a}); }};
  });
  suite("permute", [](Rng& g) {
    const Shape s{extent(g, 1, 3), extent(g, 1, 3), extent(g, 1, 3), extent(g, 1, 3)};
    std::vector<std::size_t> order{0, 1, 2, 3};
    g.shuffle(std::span(order));
    return Case{random_tensor(s, g), [order](const Tensor<T>& x) { return permute(x, order); }};
  });
  suite("sum", [](Rng& g) {
    return Case{random_tensor({extent(g, 1, 5), extent(g, 1, 5)}, g), [](const Tensor<T>& x) { return sum(x); }};
  });
  suite("mean", [](Rng& g) {
    return Case{random_tensor({extent(g, 1, 5), extent(g, 1, 5)}, g), [](const Tensor<T>& x) { return mean(x); }};
  });
  suite("cross_entropy", [](Rng& g) {
    const std::size_t b = extent(g, 1, 4), c = extent(g, 2, 5);
    Tensor<T> t = random_tensor({b, c}, g, 0.0, 1.0);
    auto td = t.mutable_data();
    for (std::size_t i = 0; i < b; ++i) {
      T total = 0;
      for (std::size_t j = 0; j < c; ++j) total += td[i * c + j];
      for (std::size_t j = 0; j < c; ++j) td[i * c + j] /= total;
    }
    return Case{random_tensor({b, c}, g, -3, 3), [t](const Tensor<T>& x) { return cross_entropy(x, t); }};
  });
  suite("conv2d", [](Rng& g) {
    Conv2DSpec spec{extent(g, 1, 3), extent(g, 1, 3), extent(g, 1, 3), extent(g, 1, 2), 0};
    spec.padding = g.below(spec.kernel);
    const std::size_t side = extent(g, spec.kernel, spec.kernel + 4);
    Tensor<T> x = random_tensor({extent(g, 1, 2), spec.in_channels, side, side}, g);
    Tensor<T> w = random_tensor({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}, g);
    Tensor<T> b = random_tensor({spec.out_channels}, g);
    switch (g.below(3)) {
      case 0: return Case{x, [w, b, spec](const Tensor<T>& v) { return conv2d(v, w, b, spec); }};
      case 1: return Case{w, [x, b, spec](const Tensor<T>& v) { return conv2d(x, v, b, spec); }};
      default: return Case{b, [x, w, spec](const Tensor<T>& v) { return conv2d(x, w, v, spec); }};
    }
  });
  suite("maxpool2d", [](Rng& g) {
    PoolSpec spec{extent(g, 1, 3), extent(g, 1, 2), 0};
    spec.padding = g.below(spec.kernel / 2 + 1);
    const std::size_t side = extent(g, spec.kernel, spec.kernel + 4);
    return Case{random_tensor({extent(g, 1, 2), extent(g, 1, 2), side, side}, g),
                [spec](const Tensor<T>& x) { return maxpool2d(x, spec); }};
  });
  suite("layer_norm", [](Rng& g) {
    const std::size_t rows = extent(g, 1, 3), h = extent(g, 3, 6);  // at h = 2 the output is +-1 for any x
    Tensor<T> x = random_tensor({rows, h}, g, -2, 2);
    Tensor<T> gamma = random_tensor({h}, g, 0.5, 1.5);
    Tensor<T> beta = random_tensor({h}, g);
    switch (g.below(3)) {
      case 0: return Case{x, [gamma, beta](const Tensor<T>& v) { return layer_norm(v, gamma, beta); }};
      case 1: return Case{gamma, [x, beta](const Tensor<T>& v) { return layer_norm(x, v, beta); }};
      default: return Case{beta, [x, gamma](const Tensor<T>& v) { return layer_norm(x, gamma, v); }};
    }
  });
  suite("gelu", [](Rng& g) {
    return Case{random_tensor({extent(g, 1, 6)}, g, -3, 3), [](const Tensor<T>& x) { return gelu(x); }};
  });
  suite("drop_path", [](Rng& g) {
    const std::uint64_t mask_seed = g.next_u64();
    return Case{random_tensor({extent(g, 2, 6), extent(g, 1, 4)}, g), [mask_seed](const Tensor<T>& x) {
                  Rng fixed(mask_seed);  // same mask at every probe
                  return drop_path(x, 0.3, true, &fixed);
                }};
  });
  suite("layer_norm.gelu", [](Rng& g) {
    Tensor<T> gamma(Shape{4}, 1.0);
    Tensor<T> beta(Shape{4}, 0.0);
    return Case{random_tensor({4}, g), [gamma, beta](const Tensor<T>& x) { return layer_norm(gelu(x), gamma, beta); }};
  });
  return reports;
}

ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.image_size = 32;
  c.in_channels = 3;
  c.layers = 2;
  c.hidden = 32;
  c.heads = 2;
  c.mlp_size = 64;
  c.num_classes = 3;
  c.stem_channels = 8;
  return c;
}

GradCheckReport model_gradcheck(std::uint64_t seed, std::size_t probes_per_tensor) {
  const ModelConfig config = gradcheck_model_config();
  Rng rng(seed);
  ModelParams<T> params = init_params<T>(config, rng);
  // At init scale the attention is near uniform and the q/k/temperature
  // gradients sit around 1e-8, below what central differences resolve. Probe a
  // generic point instead: fan-in scaled weights, O(1) offsets everywhere else.
  for (const auto& p : params.named()) {
    const Shape& shape = p.tensor.shape();
    Tensor<T> handle = p.tensor;
    auto values = handle.mutable_data();
    if (shape.size() >= 2 && p.name != "pos_embed") {
      const std::size_t fan_in = shape.size() == 4 ? p.tensor.numel() / shape[0] : shape[0];
      const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (T& v : values) v = rng.normal(0.0, stddev);
    } else {
      const double centre = p.name.ends_with(".gamma") ? 1.0 : 0.0;
      for (T& v : values) v = centre + rng.uniform(-0.5, 0.5);
    }
  }
  const std::size_t batch = 2;
  Tensor<T> images = random_tensor({batch, config.in_channels, config.image_size, config.image_size}, rng);
  Tensor<T> targets(Shape{batch, config.num_classes});
  for (std::size_t b = 0; b < batch; ++b) targets.mutable_data()[b * config.num_classes + rng.below(config.num_classes)] = 1.0;

  GradCheckReport report{"model", 0, 0.0, 1e-4};
  const auto named = params.named();
  auto probes_for = [&](std::size_t numel) {
    std::vector<std::size_t> idx;
    if (numel <= probes_per_tensor) {
      for (std::size_t i = 0; i < numel; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < probes_per_tensor; ++i) idx.push_back(rng.below(numel));
    }
    return idx;
  };
  // Softmax is shift invariant, so a key bias or the pooling bias moves every
  // logit of a row equally and gets an exactly zero gradient. Central
  // differences only see roundoff there; assert the zero directly instead.
  auto shift_invariant = [](const std::string& name) {
    return name.ends_with(".attn.k.bias") || name == "seq_pool.bias";
  };
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    tape.backward(cross_entropy(forward(images, params, config, false), targets));
  }
  for (std::size_t t = 0; t < named.size(); ++t) {
    const Tensor<T> original = named[t].tensor;
    if (shift_invariant(named[t].name)) {
      double largest = 0.0;
      for (T g : original.grad()) largest = std::max(largest, std::abs(static_cast<double>(g)));
      if (largest > 1e-12) report.max_error = std::numeric_limits<double>::infinity();
      ++report.cases;
      continue;
    }
    auto f = [&](const Tensor<T>& v) {
      std::vector<NamedTensor<T>> tensors = params.named();
      tensors[t].tensor = v;
      const ModelParams<T> swapped = assemble_params(config, std::move(tensors));
      for (const auto& p : swapped.named()) {
        if (!p.tensor.same_storage(v)) Tensor<T>(p.tensor).set_requires_grad(false);
      }
      return cross_entropy(forward(images, swapped, config, false), targets);
    };
    const GradCheckResult res = finite_diff_check(f, original, 1e-6, probes_for(original.numel()));
    report.max_error = std::max(report.max_error, res.max_rel_error);
    ++report.cases;
  }
  auto wrt_input = [&](const Tensor<T>& x) { return cross_entropy(forward(x, params, config, false), targets); };
  const GradCheckResult res = finite_diff_check(wrt_input, images, 1e-6, probes_for(images.numel()));
  report.max_error = std::max(report.max_error, res.max_rel_error);
  ++report.cases;
  return report;
}

}  // namespace comvit
