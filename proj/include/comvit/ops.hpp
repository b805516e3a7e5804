#pragma once

#include <cstddef>
#include <vector>

#include "comvit/tensor.hpp"

// Differentiable primitives. Each records a backward entry on the active
// tape when any input requires grad. Binary ops broadcast only when the
// second operand's shape is a suffix of the first's (bias rows, positional
// tables, masks); anything else is a DimensionError.
namespace comvit {

/// a[..., m, k] x b[k, n] -> [..., m, n], or batched when b has the same
/// leading extents as a.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// x scaled by s[i] along `axis`, where s has extent x.dim(axis).
template <typename T>
Tensor<T> mul_axis(const Tensor<T>& x, const Tensor<T>& s, std::size_t axis);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> shift(const Tensor<T>& x, T offset);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// log(1 + e^x), overflow-safe.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);
template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x);

/// Row softmax with max subtraction. -inf entries get exactly 0; a row
/// that is entirely -inf is a NumericalError.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Mean over the batch of -sum_c target[b,c] * log_softmax(logits)[b,c].
/// Targets are constants (soft labels).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets);

}  // namespace comvit
