#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "comvit/tensor.hpp"

namespace comvit {

using ScalarFn = std::function<Tensor<double>(const Tensor<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t probes = 0;
};

/// Compares the tape gradient of scalar f at x with central differences:
/// max_i |g_ad[i] - g_fd[i]| / max(|g_fd[i]|, 1e-8).
///
/// `coordinates` restricts the probe set (all coordinates when empty).
/// Throws NumericalError if f is non-finite at any probe.
GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-6,
                                  const std::vector<std::size_t>& coordinates = {});

}  // namespace comvit
