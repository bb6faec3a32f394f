#pragma once

// Brute-force ground truth for small models: exact posteriors by exhaustive
// expansion, distances between distributions, and the Z-hat unbiasedness
// harness.

#include <functional>
#include <map>
#include <vector>

#include "smcsteer/backend.hpp"
#include "smcsteer/seqcore.hpp"
#include "smcsteer/smc.hpp"

namespace smcsteer::oracle {

/// Distribution (or unnormalized measure) over EOS-terminated strings.
using Dist = std::map<Seq, double>;

struct ExactPosterior {
  /// Unnormalized mass of each terminated string: kernel probability times
  /// potentials, summed over every path (and program state) producing it.
  Dist mass;
  /// log of the total enumerated mass; -inf when nothing survives.
  double log_z = kNegInf;
  /// Upper bound on the mass the truncated enumeration could have missed.
  double tail_mass_bound = 0.0;

  bool null_posterior() const { return log_z == kNegInf; }
  double z() const { return std::exp(log_z); }
  /// Normalized probability of `s` (0 if not enumerated).
  double prob(const Seq& s) const;
  Dist normalized() const;
  /// Sum over strings of mass * f.
  double integrate(const std::function<double(const Seq&)>& f) const;
};

struct EnumerationLimits {
  /// Paths whose string reaches this many tokens without EOS are not expanded.
  std::size_t length_cap = 8;
  int max_steps = 64;
  EnumerateOptions step;
};

ExactPosterior enumerate_posterior(const FkModel& model, NextTokenSource& lm, const EnumerationLimits& limits = {});

/// Sum of per-run normalized particle weights, divided by the number of runs:
/// the law of one particle drawn in proportion to its weight.
class EmpiricalPool {
 public:
  void add_run(std::span<const Particle> particles);
  std::size_t runs() const { return runs_; }
  Dist distribution() const;

 private:
  Dist total_;
  std::size_t runs_ = 0;
};

/// Total variation after normalizing both sides. q's mass outside p's support
/// counts in full.
double tv_distance(const Dist& p, const Dist& q);
inline double tv_distance(const ExactPosterior& p, const Dist& q) { return tv_distance(p.normalized(), q); }

/// KL(p || q) with p as the reference, both normalized first. +inf when p has
/// mass above 1e-12 on a string where q has none.
double kl_divergence(const Dist& p, const Dist& q);

/// Runs `runs` independent SMC passes with seeds cfg.seed, cfg.seed+1, ... and
/// returns the results in seed order. Runs that hit PosteriorUnreachable come
/// back with their partial result (log_zhat = -inf).
std::vector<SmcResult> run_seeds(const FkModel& model, const LogitsBackend& backend, const SmcConfig& cfg,
                                 std::size_t runs, std::size_t threads = 1);

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};
MeanSe mean_se(std::span<const double> xs);

struct UnbiasednessReport {
  std::size_t runs = 0;
  double mean_zhat = 0.0;
  double se = 0.0;
  double exact_z = 0.0;
  /// The same for the integral estimate (1/N) sum w_i f(x_i).
  double mean_zf = 0.0;
  double se_zf = 0.0;
  double exact_zf = 0.0;
  bool pass_z = false;
  bool pass_f = false;
  bool pass = false;
};

/// Passes iff |mean - exact| <= 3 SE for both Z-hat and the f-integral.
UnbiasednessReport unbiasedness_test(const FkModel& model, const LogitsBackend& backend, const SmcConfig& cfg,
                                     std::size_t runs, double exact_z, double exact_zf,
                                     const std::function<double(const Seq&)>& f, std::size_t threads = 1);

/// Sequence length in tokens, EOS included.
double seq_length(const Seq& s);

}  // namespace smcsteer::oracle
