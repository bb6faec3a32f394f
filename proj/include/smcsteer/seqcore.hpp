#pragma once

// Vocabulary, token sequences, random substreams, and the Feynman-Kac model
// interface shared by every other part of the library.

#include <algorithm>
#include <any>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace smcsteer {

using TokenId = std::int32_t;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Raised when a caller breaks a documented precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Vocab {
 public:
  Vocab(std::vector<std::string> tokens, std::string_view eos_label);

  /// Distinct characters of `chars` (sorted by code point) followed by `eos_label`.
  static Vocab from_characters(std::string_view chars, std::string_view eos_label = "<eos>");

  std::size_t size() const { return tokens_.size(); }
  TokenId eos() const { return eos_; }
  const std::string& label(TokenId id) const;
  const std::vector<std::string>& labels() const { return tokens_; }
  /// Throws std::out_of_range for unknown labels.
  TokenId id(std::string_view label) const;
  bool contains(std::string_view label) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_ && eos_ == other.eos_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId eos_ = 0;
};

/// Splits UTF-8 text into code points; each becomes one token label.
std::vector<std::string> split_characters(std::string_view text);

/// A token sequence in which EOS, if present, is the final element.
class Seq {
 public:
  explicit Seq(TokenId eos) : eos_(eos) {}
  Seq(TokenId eos, std::vector<TokenId> ids);

  static Seq empty(const Vocab& vocab) { return Seq(vocab.eos()); }
  /// Per-character tokenization of `text`; every character must be a vocab label.
  static Seq from_text(const Vocab& vocab, std::string_view text);
  static Seq from_labels(const Vocab& vocab, std::span<const std::string> labels);

  Seq appended(TokenId tok) const;
  Seq concat(std::span<const TokenId> tail) const;

  bool terminated() const { return !ids_.empty() && ids_.back() == eos_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  TokenId operator[](std::size_t i) const { return ids_[i]; }
  TokenId back() const { return ids_.back(); }
  std::span<const TokenId> ids() const { return ids_; }
  TokenId eos_id() const { return eos_; }

  std::string to_text(const Vocab& vocab) const;
  std::vector<std::string> labels(const Vocab& vocab) const;

  auto operator<=>(const Seq&) const = default;

 private:
  TokenId eos_;
  std::vector<TokenId> ids_;
};

struct SeqHash {
  std::size_t operator()(const Seq& s) const noexcept;
};

/// Particle state: the string plus optional value-semantic program state.
struct State {
  Seq seq;
  std::any user;

  bool terminated() const { return seq.terminated(); }
};

/// Deterministic random stream. Substreams are keyed by (seed, step, tag, slot)
/// so that work can be scheduled in any order without changing results.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);
  static Rng substream(std::uint64_t seed, std::uint64_t step, std::uint64_t tag, std::uint64_t slot);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform();
  /// Index drawn with probability exp(logp[i]); the entries need not be exactly normalized.
  std::size_t categorical_log(std::span<const double> logp);

 private:
  std::mt19937_64 engine_;
};

// Substream tags.
inline constexpr std::uint64_t kExpandTag = 0;
inline constexpr std::uint64_t kResampleTag = 1;

using LogProbs = std::shared_ptr<const std::vector<double>>;

/// Source of next-token log-probabilities. Models receive one of these per
/// step; every query is keyed by a prompt (cache root) and a continuation.
class NextTokenSource {
 public:
  virtual ~NextTokenSource() = default;
  virtual const Vocab& vocab() const = 0;
  virtual LogProbs next_logprobs(std::span<const TokenId> prompt, std::span<const TokenId> continuation) = 0;
  LogProbs next_logprobs(const Seq& context) { return next_logprobs({}, context.ids()); }
};

struct Transition {
  State next;
  double prob = 0.0;           // kernel probability
  double log_potential = 0.0;  // log G_t
};

/// Exhaustive description of one kernel application.
struct EnumerableStep {
  std::vector<Transition> transitions;
  /// True when an infinite support was cut at the enumeration cap.
  bool truncated = false;
};

struct EnumerateOptions {
  /// Largest value enumerated for infinite-support choices (hole lengths).
  int support_cap = 12;
};

struct StepResult {
  State next;
  double log_potential = 0.0;
};

/// A Feynman-Kac model (s0, {M_t}, {G_t}) over token sequences, with step index
/// t starting at 1. Terminal states (EOS-terminated) are absorbing.
class FkModel {
 public:
  virtual ~FkModel() = default;

  virtual std::string name() const = 0;
  virtual State initial_state() const = 0;

  /// Draws from M_t(. | state) and returns log G_t of the transition.
  StepResult step(int t, const State& state, Rng& rng, NextTokenSource& lm) const;

  /// Full support of M_t at `state` with the potential of each transition.
  EnumerableStep enumerate(int t, const State& state, NextTokenSource& lm, const EnumerateOptions& opts = {}) const;

  virtual bool enumerable() const { return true; }

  /// Upper bound on the expected future potential product from any state;
  /// used to turn cut-off mass into a tail bound. May be +inf.
  virtual double tail_factor() const { return 1.0; }

 protected:
  virtual StepResult do_step(int t, const State& state, Rng& rng, NextTokenSource& lm) const = 0;
  virtual EnumerableStep do_enumerate(int t, const State& state, NextTokenSource& lm, const EnumerateOptions& opts) const = 0;
};

inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - m);
  return m + std::log(acc);
}

inline double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace smcsteer
