#pragma once

// Probabilistic-program runtime. A Program's step() calls sample / observe /
// condition / finish on a Runtime; compile_program turns it into an FkModel
// whose kernel is the sampling behaviour (proposal side) and whose potential
// is the product of importance ratios, observation densities, and indicators.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "smcsteer/seqcore.hpp"

namespace smcsteer::ppl {

/// Discrete distribution over non-negative integers (token ids, lengths, indices).
class Dist {
 public:
  enum class Kind { kNextToken, kGeometric, kDirac, kCategorical, kFlat };

  /// Next-token law from a log-probability vector (usually from the cache).
  static Dist next_token(LogProbs logprobs);
  /// P(k) = p (1-p)^k, k >= 0.
  static Dist geometric(double p);
  static Dist dirac(std::int64_t value);
  static Dist categorical(std::span<const double> probs);
  static Dist categorical_log(std::vector<double> logprobs);
  /// Unnormalized counting measure on k >= 0 (log_prob == 0 everywhere). Only
  /// meaningful as the target of sample() with a proposal: it turns the
  /// proposal's density into a pure importance correction.
  static Dist flat();

  Kind kind() const { return kind_; }
  double log_prob(std::int64_t value) const;
  std::int64_t sample(Rng& rng) const;

  /// Positive-probability values with their log-probabilities, in increasing
  /// order. Infinite supports stop at `cap` and set `truncated`.
  std::vector<std::pair<std::int64_t, double>> support(int cap, bool* truncated) const;

 private:
  Kind kind_ = Kind::kDirac;
  LogProbs logprobs_;
  double p_ = 0.5;
  std::int64_t value_ = 0;
};

/// Where sample() gets its values: a random stream, or a replayed choice trace.
class Chooser {
 public:
  virtual ~Chooser() = default;
  /// Returns the chosen value and its log-probability under `proposal`.
  virtual std::pair<std::int64_t, double> choose(const Dist& proposal) = 0;
};

/// The `self` a program step sees.
class Runtime {
 public:
  Runtime(State state, int t, NextTokenSource& lm, Chooser& chooser) : state_(std::move(state)), t_(t), lm_(lm), chooser_(chooser) {}

  int t() const { return t_; }
  const Vocab& vocab() const { return lm_.vocab(); }
  TokenId eos() const { return lm_.vocab().eos(); }

  Seq& s() { return state_.seq; }
  const Seq& s() const { return state_.seq; }

  /// User fields beyond s. The stored type must be copyable.
  template <class T>
  T& user() {
    if (!state_.user.has_value()) state_.user = T{};
    return std::any_cast<T&>(state_.user);
  }

  std::int64_t sample(const Dist& dist);
  std::int64_t sample(const Dist& dist, const Dist& proposal);
  void observe(const Dist& dist, std::int64_t value);
  void condition(bool flag);

  /// Next-token distribution after `context` under the empty prompt.
  Dist transformer(const Seq& context);
  /// Next-token distribution after prompt ++ continuation (cache root = prompt).
  Dist transformer(const Seq& prompt, const Seq& continuation);

  /// Terminates s with EOS.
  void finish();
  bool finished() const { return state_.seq.terminated(); }

  double log_potential() const { return log_potential_; }
  State take_state() && { return std::move(state_); }

 private:
  State state_;
  int t_;
  NextTokenSource& lm_;
  Chooser& chooser_;
  double log_potential_ = 0.0;
};

class Program {
 public:
  virtual ~Program() = default;
  virtual std::string name() const = 0;
  /// s0 (and any initial user fields).
  virtual State initial_state() const = 0;
  /// One Feynman-Kac step. Must eventually call finish().
  virtual void step(Runtime& self) const = 0;
};

/// FkModel implicitly defined by a program. Enumeration re-executes step()
/// once per combination of choices, recording each sample site's support.
class ProgramModel final : public FkModel {
 public:
  explicit ProgramModel(std::shared_ptr<const Program> program, double tail_factor = 1.0)
      : program_(std::move(program)), tail_factor_(tail_factor) {}

  std::string name() const override { return "program:" + program_->name(); }
  State initial_state() const override { return program_->initial_state(); }
  double tail_factor() const override { return tail_factor_; }

 protected:
  StepResult do_step(int t, const State& state, Rng& rng, NextTokenSource& lm) const override;
  EnumerableStep do_enumerate(int t, const State& state, NextTokenSource& lm, const EnumerateOptions& opts) const override;

 private:
  std::shared_ptr<const Program> program_;
  double tail_factor_;
};

std::shared_ptr<const FkModel> compile_program(std::shared_ptr<const Program> program, double tail_factor = 1.0);

}  // namespace smcsteer::ppl
