#include "comvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "comvit/errors.hpp"

namespace comvit {

namespace {

double evaluate(const ScalarFn& f, const Tensor<double>& x, std::size_t probe) {
  const Tensor<double> out = f(x);
  if (out.numel() != 1) throw DimensionError("finite_diff_check: f must return a scalar");
  const double v = out.item();
  if (!std::isfinite(v)) {
    throw NumericalError("finite_diff_check: f is non-finite at probe of coordinate " + std::to_string(probe));
  }
  return v;
}

}  // namespace

GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor<double>& x, double eps,
                                  const std::vector<std::size_t>& coordinates) {
  Tensor<double> leaf = x.detach();
  leaf.set_requires_grad(true);
  std::vector<double> analytic(x.numel(), 0.0);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const Tensor<double> loss = f(leaf);
    if (!std::isfinite(loss.item())) throw NumericalError("finite_diff_check: f is non-finite at x");
    if (loss.requires_grad()) tape.backward(loss);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  }

  std::vector<std::size_t> probes = coordinates;
  if (probes.empty()) {
    probes.resize(x.numel());
    std::iota(probes.begin(), probes.end(), std::size_t{0});
  }

  GradCheckResult result;
  Tensor<double> work = x.detach();
  for (std::size_t i : probes) {
    if (i >= x.numel()) throw IndexError("finite_diff_check: coordinate out of range");
    const double original = work.data()[i];
    work.mutable_data()[i] = original + eps;
    const double up = evaluate(f, work, i);
    work.mutable_data()[i] = original - eps;
    const double down = evaluate(f, work, i);
    work.mutable_data()[i] = original;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), 1e-8);
    if (result.probes == 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
    ++result.probes;
  }
  return result;
}

}  // namespace comvit
