#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "comvit/rng.hpp"
#include "comvit/tensor.hpp"

namespace comvit::test {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> values(shape_numel(shape));
  for (T& v : values) v = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(shape, std::move(values));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - b[i]));
  return worst;
}

template <typename T>
std::vector<double> to_vector(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace comvit::test
