#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "comvit/model.hpp"

namespace comvit {

struct GradCheckReport {
  std::string name;
  std::size_t cases = 0;
  double max_error = 0.0;
  double threshold = 0.0;
  bool passed() const { return max_error < threshold; }
};

/// Central-difference checks (f64) of every primitive op, each against
/// `cases` random shapes and inputs, threshold 1e-6.
std::vector<GradCheckReport> primitive_gradchecks(std::uint64_t seed, std::size_t cases = 10);

/// Small config used for whole-model checks: image 32, 2 layers, width 32,
/// 2 heads.
ModelConfig gradcheck_model_config();

/// Whole-model check of the loss against every parameter tensor (up to
/// `probes_per_tensor` coordinates each) and the input, threshold 1e-4.
GradCheckReport model_gradcheck(std::uint64_t seed, std::size_t probes_per_tensor = 12);

}  // namespace comvit
