#pragma once

// Sequential Monte Carlo steering: K-fold expansion of live particles,
// pass-through of stopped particles, and without-replacement downsampling.
// All weight arithmetic is in log space.

#include <optional>
#include <vector>

#include "smcsteer/cache.hpp"
#include "smcsteer/seqcore.hpp"

namespace smcsteer {

struct Particle {
  State state;
  double log_weight = 0.0;
};

struct SmcConfig {
  std::size_t n_particles = 4;
  std::size_t expansion_factor = 3;
  int max_steps = 256;
  std::uint64_t seed = 0;
  /// Worker threads for particle expansion. Results do not depend on it.
  std::size_t threads = 1;
  CacheMode cache_mode = CacheMode::kEnabled;
  /// Negative control only: give stratified survivors their own rescaled
  /// weight instead of the common unbiased weight. Biases Z-hat.
  bool uncorrected_stratified_weights = false;

  void validate() const;
};

struct SmcResult {
  std::vector<Particle> particles;
  double log_zhat = 0.0;
  int steps_taken = 0;
  CacheStats cache_stats;
};

class SmcError : public std::runtime_error {
 public:
  SmcError(const std::string& what, SmcResult partial) : std::runtime_error(what), partial_(std::move(partial)) {}
  const SmcResult& partial() const { return partial_; }

 private:
  SmcResult partial_;
};

/// Every candidate weight became zero. The partial result reports Z-hat = 0.
class PosteriorUnreachable : public SmcError {
 public:
  using SmcError::SmcError;
};

/// Live particles remained after max_steps.
class StepCapExceeded : public SmcError {
 public:
  using SmcError::SmcError;
};

/// inf{c > 0 : sum_i min(1, c w_i) > n} for normalized weights w. Returns
/// nullopt when at most n weights are positive (the set is empty).
std::optional<double> find_cstar(std::span<const double> norm_weights, std::size_t n);

struct Selection {
  std::vector<std::size_t> deterministic;  // c* w_i >= 1
  std::vector<std::size_t> stratified;     // chosen among c* w_i < 1, increasing index
  double cstar = 0.0;
  bool keep_all = false;                   // fewer than n positive weights
};

/// Chooses n distinct indices: the deterministic set plus a single-uniform
/// stratified pass over the rest, so index i is kept with probability
/// min(1, c* w_i). With keep_all, `deterministic` lists every positive index.
Selection select_without_replacement(std::span<const double> norm_weights, std::size_t n, Rng& rng);

/// Downsamples `candidates` (whose count is N') to at most n particles and
/// rescales weights so that (1/n) sum w stays an unbiased estimate of
/// (1/N') sum of candidate weights.
std::vector<Particle> downsample_without_replacement(std::vector<Particle> candidates, std::size_t n, Rng& rng,
                                                     bool uncorrected_stratified_weights = false);

/// Runs SMC steering with a fresh cache (per cfg.cache_mode) over `backend`.
SmcResult smc_run(const FkModel& model, const SmcConfig& cfg, const LogitsBackend& backend);

/// Runs SMC steering against an existing source (cache, or a test double).
SmcResult smc_run(const FkModel& model, const SmcConfig& cfg, NextTokenSource& lm);

/// logsumexp(log_weights) - log n.
double log_mean_weight(std::span<const Particle> particles, std::size_t n);

}  // namespace smcsteer
