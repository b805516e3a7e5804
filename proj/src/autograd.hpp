#pragma once

#include <cmath>
#include <initializer_list>
#include <string>

#include "comvit/errors.hpp"
#include "comvit/tensor.hpp"

namespace comvit::detail {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record(Tensor<T>& out, typename Tape<T>::BackwardFn fn) {
  out.set_requires_grad(true);
  Tape<T>::current()->record(out, std::move(fn));
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Non-finite output is only legal when some input was already non-finite
// (the attention mask carries -inf on purpose).
template <typename T>
void ensure_finite(const Tensor<T>& out, const char* op, std::initializer_list<const Tensor<T>*> inputs) {
  if (all_finite(out)) return;
  for (const Tensor<T>* t : inputs) {
    if (!all_finite(*t)) return;
  }
  throw NumericalError(std::string(op) + " produced non-finite values from finite inputs");
}

}  // namespace comvit::detail
