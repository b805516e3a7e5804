#include "comvit/nn.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "comvit/errors.hpp"
#include "comvit/ops.hpp"
#include "gemm.hpp"

namespace comvit {

using detail::ensure_finite;
using detail::record;
using detail::should_record;

namespace {

std::size_t window_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (kernel == 0 || stride == 0) throw ConfigError("kernel and stride must be >= 1");
  if (in + 2 * padding < kernel) {
    throw DimensionError("window of " + std::to_string(kernel) + " does not fit input extent " +
                         std::to_string(in) + " with padding " + std::to_string(padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

// cols[(c*k + ky)*k + kx][oy*ow + ox] for one image.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w, const Conv2DSpec& s,
            std::size_t oh, std::size_t ow, T* cols) {
  const std::size_t k = s.kernel;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding);
            const bool inside = iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w);
            row[oy * ow + ox] = inside ? img[(c * h + iy) * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, const Conv2DSpec& s,
            std::size_t oh, std::size_t ow, T* img) {
  const std::size_t k = s.kernel;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            img[(c * h + iy) * w + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t Conv2DSpec::output_extent(std::size_t in) const {
  return window_extent(in, kernel, stride, padding);
}

std::size_t PoolSpec::output_extent(std::size_t in) const {
  return window_extent(in, kernel, stride, padding);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const Conv2DSpec& spec) {
  const Shape expect_w{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
  if (x.rank() != 4 || x.dim(1) != spec.in_channels || weight.shape() != expect_w ||
      bias.shape() != Shape{spec.out_channels}) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                         ", bias " + shape_str(bias.shape()) + " inconsistent with " +
                         std::to_string(spec.in_channels) + "->" + std::to_string(spec.out_channels) + " k" +
                         std::to_string(spec.kernel));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const std::size_t oh = spec.output_extent(h);
  const std::size_t ow = spec.output_extent(w);
  const std::size_t patch = spec.in_channels * spec.kernel * spec.kernel;
  const std::size_t plane = oh * ow;

  Tensor<T> out(Shape{batch, spec.out_channels, oh, ow});
  std::vector<T> cols(patch * plane);
  auto od = out.mutable_data();
  auto bd = bias.data();
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data().data() + b * spec.in_channels * h * w, spec.in_channels, h, w, spec, oh, ow, cols.data());
    T* dst = od.data() + b * spec.out_channels * plane;
    for (std::size_t o = 0; o < spec.out_channels; ++o) std::fill(dst + o * plane, dst + (o + 1) * plane, bd[o]);
    detail::gemm(false, false, spec.out_channels, plane, patch, weight.data().data(), cols.data(), dst);
  }
  ensure_finite(out, "conv2d", {&x, &weight, &bias});

  if (should_record({&x, &weight, &bias})) {
    record(out, [x, weight, bias, out, spec, batch, h, w, oh, ow, patch, plane] {
      auto g = out.grad();
      std::vector<T> cols(patch * plane);
      std::vector<T> dcols;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* gb = g.data() + b * spec.out_channels * plane;
        if (bias.requires_grad()) {
          auto gbias = bias.grad_buffer();
          for (std::size_t o = 0; o < spec.out_channels; ++o) {
            T acc = 0;
            for (std::size_t p = 0; p < plane; ++p) acc += gb[o * plane + p];
            gbias[o] += acc;
          }
        }
        if (weight.requires_grad()) {
          im2col(x.data().data() + b * spec.in_channels * h * w, spec.in_channels, h, w, spec, oh, ow, cols.data());
          detail::gemm(false, true, spec.out_channels, patch, plane, gb, cols.data(), weight.grad_buffer().data());
        }
        if (x.requires_grad()) {
          dcols.assign(patch * plane, T(0));
          detail::gemm(true, false, patch, plane, spec.out_channels, weight.data().data(), gb, dcols.data());
          col2im(dcols.data(), spec.in_channels, h, w, spec, oh, ow,
                 x.grad_buffer().data() + b * spec.in_channels * h * w);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const PoolSpec& spec) {
  if (x.rank() != 4) throw DimensionError("maxpool2d: expected [B x C x H x W], got " + shape_str(x.shape()));
  if (spec.padding * 2 > spec.kernel) {
    // a window made only of padding would have no real maximum
    throw ConfigError("maxpool2d: padding must be at most half the kernel");
  }
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const std::size_t oh = spec.output_extent(h);
  const std::size_t ow = spec.output_extent(w);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xd.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_at = 0;
        bool found = false;
        for (std::size_t ky = 0; ky < spec.kernel; ++ky) {
          const long iy = static_cast<long>(oy * spec.stride + ky) - static_cast<long>(spec.padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < spec.kernel; ++kx) {
            const long ix = static_cast<long>(ox * spec.stride + kx) - static_cast<long>(spec.padding);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const T v = src[iy * w + ix];
            if (!found || v > best) {  // strict: first maximum wins
              best = v;
              best_at = iy * w + ix;
              found = true;
            }
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        od[o] = best;
        argmax[o] = p * h * w + best_at;
      }
    }
  }
  if (should_record({&x})) {
    record(out, [x, out, argmax = std::move(argmax)] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t width = x.dim(x.rank() - 1);
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match last extent of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  Tensor<T> out(x.shape());
  std::vector<T> normed(x.numel());
  std::vector<T> rstd(rows);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto od = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * width;
    T mu = 0;
    for (std::size_t i = 0; i < width; ++i) mu += row[i];
    mu /= static_cast<T>(width);
    T var = 0;
    for (std::size_t i = 0; i < width; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(width);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < width; ++i) {
      const T n = (row[i] - mu) * rstd[r];
      normed[r * width + i] = n;
      od[r * width + i] = n * gd[i] + bd[i];
    }
  }
  ensure_finite(out, "layer_norm", {&x, &gamma, &beta});
  if (should_record({&x, &gamma, &beta})) {
    record(out, [x, gamma, beta, out, rows, width, normed = std::move(normed), rstd = std::move(rstd)] {
      auto g = out.grad();
      auto gd = gamma.data();
      std::span<T> ggamma = gamma.requires_grad() ? gamma.grad_buffer() : std::span<T>{};
      std::span<T> gbeta = beta.requires_grad() ? beta.grad_buffer() : std::span<T>{};
      std::span<T> gx = x.requires_grad() ? x.grad_buffer() : std::span<T>{};
      std::vector<T> dn(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * width;
        T sum_dn = 0;
        T sum_dn_n = 0;
        for (std::size_t i = 0; i < width; ++i) {
          if (!ggamma.empty()) ggamma[i] += g[base + i] * normed[base + i];
          if (!gbeta.empty()) gbeta[i] += g[base + i];
          dn[i] = g[base + i] * gd[i];
          sum_dn += dn[i];
          sum_dn_n += dn[i] * normed[base + i];
        }
        if (gx.empty()) continue;
        const T inv_w = T(1) / static_cast<T>(width);
        for (std::size_t i = 0; i < width; ++i) {
          gx[base + i] += rstd[r] * (dn[i] - inv_w * sum_dn - normed[base + i] * inv_w * sum_dn_n);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] * T(0.5) * (T(1) + std::erf(xd[i] * inv_sqrt2));
  ensure_finite(out, "gelu", {&x});
  if (should_record({&x})) {
    record(out, [x, out, inv_sqrt2] {
      auto g = out.grad();
      auto xd = x.data();
      auto gx = x.grad_buffer();
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xd[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double rate, bool training, Rng* rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("drop_path rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) throw ConfigError("drop_path in training mode needs an rng");
  const std::size_t batch = x.dim(0);
  std::vector<T> keep(batch);
  const T kept = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t b = 0; b < batch; ++b) keep[b] = rng->bernoulli(1.0 - rate) ? kept : T(0);
  return mul_axis(x, Tensor<T>(Shape{batch}, std::move(keep)), 0);
}

#define COMVIT_INSTANTIATE_NN(T)                                                                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2DSpec&);      \
  template Tensor<T> maxpool2d(const Tensor<T>&, const PoolSpec&);                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                               \
  template Tensor<T> drop_path(const Tensor<T>&, double, bool, Rng*);

COMVIT_INSTANTIATE_NN(float)
COMVIT_INSTANTIATE_NN(double)

}  // namespace comvit
