#include "comvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "autograd.hpp"
#include "comvit/errors.hpp"
#include "gemm.hpp"

namespace comvit {

using detail::ensure_finite;
using detail::record;
using detail::should_record;

namespace {

// Number of times b repeats inside a when b's shape is a suffix of a's.
std::size_t suffix_repeats(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) ok = a[a.size() - b.size() + i] == b[i];
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  }
  return shape_numel(a) / shape_numel(b);
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  ensure_finite(out, name, {&x});
  if (should_record({&x})) {
    record(out, [x, out, deriv] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      auto xd = x.data();
      auto od = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], od[i]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t n = b.dim(b.rank() - 1);
  if (b.dim(b.rank() - 2) != k) throw mismatch();

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  const bool shared = b.rank() == 2;
  std::size_t batch = 1;
  if (!shared) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw mismatch();
    }
    batch = shape_numel(Shape(a.shape().begin(), a.shape().end() - 2));
  }

  if (shared) {
    // Leading batch folds into the row dimension.
    const std::size_t rows = a.numel() / k;
    detail::gemm(false, false, rows, n, k, a.data().data(), b.data().data(), out.mutable_data().data());
  } else {
    for (std::size_t p = 0; p < batch; ++p) {
      detail::gemm(false, false, m, n, k, a.data().data() + p * m * k, b.data().data() + p * k * n,
                   out.mutable_data().data() + p * m * n);
    }
  }
  ensure_finite(out, "matmul", {&a, &b});

  if (should_record({&a, &b})) {
    record(out, [a, b, out, shared, batch, m, n, k] {
      const T* g = out.grad().data();
      if (shared) {
        const std::size_t rows = a.numel() / k;
        if (a.requires_grad()) detail::gemm(false, true, rows, k, n, g, b.data().data(), a.grad_buffer().data());
        if (b.requires_grad()) detail::gemm(true, false, k, n, rows, a.data().data(), g, b.grad_buffer().data());
        return;
      }
      for (std::size_t p = 0; p < batch; ++p) {
        const T* gp = g + p * m * n;
        if (a.requires_grad()) {
          detail::gemm(false, true, m, k, n, gp, b.data().data() + p * k * n, a.grad_buffer().data() + p * m * k);
        }
        if (b.requires_grad()) {
          detail::gemm(true, false, k, n, m, a.data().data() + p * m * k, gp, b.grad_buffer().data() + p * k * n);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = suffix_repeats(a.shape(), b.shape(), "add");
  const std::size_t inner = b.numel();
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.mutable_data();
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < inner; ++i) od[r * inner + i] = ad[r * inner + i] + bd[i];
  }
  ensure_finite(out, "add", {&a, &b});
  if (should_record({&a, &b})) {
    record(out, [a, b, out, reps, inner] {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < reps; ++r) {
          for (std::size_t i = 0; i < inner; ++i) gb[i] += g[r * inner + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = suffix_repeats(a.shape(), b.shape(), "mul");
  const std::size_t inner = b.numel();
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.mutable_data();
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < inner; ++i) od[r * inner + i] = ad[r * inner + i] * bd[i];
  }
  ensure_finite(out, "mul", {&a, &b});
  if (should_record({&a, &b})) {
    record(out, [a, b, out, reps, inner] {
      auto g = out.grad();
      auto ad = a.data();
      auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t r = 0; r < reps; ++r) {
          for (std::size_t i = 0; i < inner; ++i) ga[r * inner + i] += g[r * inner + i] * bd[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < reps; ++r) {
          for (std::size_t i = 0; i < inner; ++i) gb[i] += g[r * inner + i] * ad[r * inner + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_axis(const Tensor<T>& x, const Tensor<T>& s, std::size_t axis) {
  if (axis >= x.rank() || s.rank() != 1 || s.dim(0) != x.dim(axis)) {
    throw DimensionError("mul_axis: scale " + shape_str(s.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const std::size_t extent = x.dim(axis);
  const std::size_t inner = shape_numel(Shape(x.shape().begin() + axis + 1, x.shape().end()));
  const std::size_t outer = x.numel() / (extent * inner);
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto sd = s.data();
  auto od = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      const std::size_t base = (o * extent + e) * inner;
      for (std::size_t i = 0; i < inner; ++i) od[base + i] = xd[base + i] * sd[e];
    }
  }
  ensure_finite(out, "mul_axis", {&x, &s});
  if (should_record({&x, &s})) {
    record(out, [x, s, out, outer, extent, inner] {
      auto g = out.grad();
      auto xd = x.data();
      auto sd = s.data();
      std::span<T> gx = x.requires_grad() ? x.grad_buffer() : std::span<T>{};
      std::span<T> gs = s.requires_grad() ? s.grad_buffer() : std::span<T>{};
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t base = (o * extent + e) * inner;
          T acc = 0;
          for (std::size_t i = 0; i < inner; ++i) {
            // masked logits are -inf with zero upstream grad; skip the 0 * inf
            if (g[base + i] == T(0)) continue;
            if (!gx.empty()) gx[base + i] += g[base + i] * sd[e];
            acc += g[base + i] * xd[base + i];
          }
          if (!gs.empty()) gs[e] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> shift(const Tensor<T>& x, T offset) {
  return unary(
      x, "shift", [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary(
      x, "softplus",
      [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return unary(
      x, "reciprocal", [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t cols = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / cols;
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * cols;
    T* dst = od.data() + r * cols;
    const T peak = *std::max_element(row, row + cols);
    if (peak == -std::numeric_limits<T>::infinity()) {
      throw NumericalError("softmax_lastdim: row " + std::to_string(r) + " is entirely -inf");
    }
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c] = std::exp(row[c] - peak);
      total += dst[c];
    }
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  ensure_finite(out, "softmax_lastdim", {&x});
  if (should_record({&x})) {
    record(out, [x, out, rows, cols] {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        T dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
        for (std::size_t c = 0; c < cols; ++c) gx[base + c] += y[base + c] * (g[base + c] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (should_record({&x})) {
    record(out, [x, out] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  std::vector<bool> seen(rank, false);
  bool valid = order.size() == rank;
  for (std::size_t i = 0; valid && i < rank; ++i) {
    valid = order[i] < rank && !seen[order[i]];
    if (valid) seen[order[i]] = true;
  }
  if (!valid) throw DimensionError("permute: invalid axis order for " + shape_str(x.shape()));

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.dim(order[i]);
    src_strides[i] = in_strides[order[i]];
  }
  // gather index for every output element, in output order
  std::vector<std::size_t> gather(x.numel());
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < gather.size(); ++flat) {
    gather[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      src += src_strides[ax];
      if (counter[ax] < out_shape[ax]) break;
      src -= src_strides[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  Tensor<T> out(out_shape);
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < gather.size(); ++i) od[i] = xd[gather[i]];
  if (should_record({&x})) {
    record(out, [x, out, gather = std::move(gather)] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[gather[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  ensure_finite(out, "sum", {&x});
  if (should_record({&x})) {
    record(out, [x, out] {
      const T g = out.grad()[0];
      for (T& v : x.grad_buffer()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.rank() != 2 || targets.shape() != logits.shape()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  auto z = logits.data();
  auto t = targets.data();
  std::vector<T> probs(z.size());
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z.data() + b * classes;
    const T peak = *std::max_element(row, row + classes);
    T denom = 0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - peak);
    const T lse = peak + std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - lse);
      total -= t[b * classes + c] * (row[c] - lse);
    }
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(batch));
  ensure_finite(out, "cross_entropy", {&logits, &targets});
  if (should_record({&logits})) {
    record(out, [logits, targets, out, batch, classes, probs = std::move(probs)] {
      const T g = out.grad()[0] / static_cast<T>(batch);
      auto t = targets.data();
      auto gz = logits.grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        T mass = 0;
        for (std::size_t c = 0; c < classes; ++c) mass += t[b * classes + c];
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t i = b * classes + c;
          gz[i] += g * (mass * probs[i] - t[i]);
        }
      }
    });
  }
  return out;
}

#define COMVIT_INSTANTIATE_OPS(T)                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mul_axis(const Tensor<T>&, const Tensor<T>&, std::size_t);     \
  template Tensor<T> scale(const Tensor<T>&, T);                                    \
  template Tensor<T> shift(const Tensor<T>&, T);                                    \
  template Tensor<T> relu(const Tensor<T>&);                                        \
  template Tensor<T> softplus(const Tensor<T>&);                                    \
  template Tensor<T> reciprocal(const Tensor<T>&);                                  \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                              \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);    \
  template Tensor<T> sum(const Tensor<T>&);                                         \
  template Tensor<T> mean(const Tensor<T>&);                                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, const Tensor<T>&);

COMVIT_INSTANTIATE_OPS(float)
COMVIT_INSTANTIATE_OPS(double)

}  // namespace comvit
