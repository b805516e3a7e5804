#pragma once

#include <cstddef>

#include "comvit/rng.hpp"
#include "comvit/tensor.hpp"

namespace comvit {

/// Square-kernel convolution geometry. Zero padding on all four sides.
struct Conv2DSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// floor((in + 2p - k) / s) + 1; throws DimensionError when that is < 1.
  std::size_t output_extent(std::size_t in) const;
  bool operator==(const Conv2DSpec&) const = default;
};

/// Max pooling; padded cells behave as -inf and are never selected.
struct PoolSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t output_extent(std::size_t in) const;
  bool operator==(const PoolSpec&) const = default;
};

/// Cross-correlation (no kernel flip) plus bias.
/// x [B x C x H x W], weight [O x C x k x k], bias [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const Conv2DSpec& spec);

/// Backward routes each window's gradient to its first maximum in row-major
/// scan order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const PoolSpec& spec);

/// Normalizes over the last axis with population variance, then applies
/// gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// x * Phi(x) with the exact erf form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Stochastic depth on a residual branch. In training each sample (leading
/// axis) is kept with probability 1 - rate and rescaled by 1 / (1 - rate);
/// one Bernoulli draw per sample, in batch order. Identity otherwise.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double rate, bool training, Rng* rng);

}  // namespace comvit
