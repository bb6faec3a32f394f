#pragma once

// Worked constrained-generation models, each available as a hand-written
// FkModel and as a PPL program, plus the greedy-masking and beam-search
// baselines they are compared against.

#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "smcsteer/ppl.hpp"
#include "smcsteer/seqcore.hpp"

namespace smcsteer::zoo {

/// No token keeps the prefix inside the constraint set.
class AllMasked : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotPrefixClosed : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Deterministic finite automaton over token ids. Missing transitions reject.
struct Dfa {
  int start = 0;
  std::vector<std::map<TokenId, int>> transitions;
  std::set<int> accepting;
};

/// Membership test for the prefix set C of a hard constraint. A completion
/// ending in EOS is in C iff it is a full string satisfying the constraint.
/// Construction rejects predicates that are not prefix-closed (checked
/// exhaustively over short strings).
class PrefixConstraint {
 public:
  using Predicate = std::function<bool(const Seq&)>;

  PrefixConstraint(std::string name, Predicate allows, const Vocab& vocab);

  static PrefixConstraint none(const Vocab& vocab);
  static PrefixConstraint forbid_tokens(const Vocab& vocab, std::set<TokenId> forbidden);
  /// Every run of non-separator tokens has at most `max_len` tokens.
  static PrefixConstraint max_word_length(const Vocab& vocab, int max_len, std::string separator = " ");
  /// Prefixes of strings accepted by `dfa`.
  static PrefixConstraint regular(const Vocab& vocab, Dfa dfa);

  bool allows(const Seq& s) const { return allows_(s); }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  Predicate allows_;
};

/// Throws NotPrefixClosed with a counterexample if some member of C (up to
/// `depth` tokens) has a prefix outside C.
void verify_prefix_closed(const PrefixConstraint::Predicate& allows, const Vocab& vocab, int depth);

struct InfillTemplate {
  /// x0 ... xn; only xn is (and must be) EOS-terminated.
  std::vector<Seq> fragments;
  /// Geometric hole-length parameter.
  double p = 0.5;

  void validate() const;
};

enum class ObserveStyle { kObserve, kSampleDirac };

using ModelPtr = std::shared_ptr<const FkModel>;

ModelPtr hard_constraint_plain(Seq prompt, PrefixConstraint c);
ModelPtr hard_constraint_masked(Seq prompt, PrefixConstraint c);
ModelPtr infill(InfillTemplate tmpl, bool length_correction);
ModelPtr intersect(std::vector<Seq> prompts, bool locally_optimal);

/// The same models written against the PPL runtime.
std::shared_ptr<const ppl::Program> hard_constraint_program(Seq prompt, PrefixConstraint c, bool masked);
std::shared_ptr<const ppl::Program> infill_program(InfillTemplate tmpl, bool length_correction,
                                                   ObserveStyle style = ObserveStyle::kObserve);
std::shared_ptr<const ppl::Program> intersect_program(std::vector<Seq> prompts, bool locally_optimal,
                                                      ObserveStyle style = ObserveStyle::kObserve);

struct GreedyOutcome {
  Seq completion;
  bool dead_end = false;
};

/// Left-to-right sampling from the renormalized masked next-token law, with no
/// lookahead. Stops with dead_end when no token is admissible.
GreedyOutcome greedy_masked_decode(const Seq& prompt, const PrefixConstraint& c, NextTokenSource& lm, Rng& rng,
                                   int max_len = 256);

struct Hypothesis {
  Seq seq;
  double score = 0.0;  // sum of log kernel probability + log potential
};

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> finished;  // best first
  bool found = false;
};

/// Beam search over the model's scored transition tree.
BeamResult beam_search(const FkModel& model, NextTokenSource& lm, std::size_t beam_size, int max_steps,
                       const EnumerateOptions& opts = {});

}  // namespace smcsteer::zoo
