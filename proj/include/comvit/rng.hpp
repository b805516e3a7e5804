#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <utility>

namespace comvit {

/// Counter-based 64-bit generator: the n-th draw is a fixed mix of
/// (seed, n), so the full state is the pair and can be checkpointed.
///
/// Draw order inside one training step is fixed: shuffle (once per epoch),
/// then per batch the augmentation draws in sample order, the mixup/cutmix
/// draws, then drop-path draws layer by layer.
class Rng {
 public:
  using result_type = std::uint64_t;

  struct State {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;
    bool operator==(const State&) const = default;
  };

  explicit Rng(std::uint64_t seed = 0) : state_{seed, 0} {}
  explicit Rng(State s) : state_(s) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n), rejection-sampled (no modulo bias).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Normal truncated to [-2, 2] standard deviations by resampling.
  double truncated_normal(double stddev);
  /// Marsaglia-Tsang sampler.
  double gamma(double alpha);
  double beta(double a, double b);

  template <typename Elem>
  void shuffle(std::span<Elem> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  State state() const { return state_; }
  void restore(State s) { state_ = s; }

 private:
  State state_;
};

}  // namespace comvit
