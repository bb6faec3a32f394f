#pragma once

// Small, exactly solvable instances shared by the tests, the validate
// command, and the acceptance binary.

#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "smcsteer/backend.hpp"
#include "smcsteer/oracle.hpp"
#include "smcsteer/zoo.hpp"

namespace smcsteer::toy {

/// {a, b, <eos>}.
Vocab abe_vocab();
std::shared_ptr<const LogitsBackend> uniform_abe();
/// Same vocab, every context: a 0.2, b 0.2, EOS 0.6.
std::shared_ptr<const LogitsBackend> eos_heavy_abe();

/// Table backend over {a, b, c, <eos>}: from [] it emits a (0.7) or b (0.3);
/// after [a] only c is possible, after [b] only EOS. Under "no c", taking a
/// leads to a dead end.
struct Trap {
  std::shared_ptr<const LogitsBackend> backend;
  zoo::PrefixConstraint constraint;
  double trap_mass;
};
Trap trap();

/// Two prompts ("a" and "b") over {a, b, <eos>} that disagree on the next
/// token: each puts `agree` on its own letter, `disagree` on the other, and
/// the rest on EOS. Continuations are forced to end after `depth` tokens.
struct IntersectToy {
  std::shared_ptr<const LogitsBackend> backend;
  std::vector<Seq> prompts;
};
IntersectToy intersect_toy(int depth = 4, double agree = 0.8, double disagree = 0.18);

/// Wraps a backend and records every evaluated context.
class CountingBackend final : public LogitsBackend {
 public:
  explicit CountingBackend(std::shared_ptr<const LogitsBackend> inner) : inner_(std::move(inner)) {}

  const Vocab& vocab() const override { return inner_->vocab(); }
  std::string kind() const override { return inner_->kind(); }
  Evaluation evaluate(std::span<const TokenId> context, const BackendState* prefix_state) const override;

  std::size_t evaluations() const;
  std::size_t distinct_contexts() const;

 private:
  std::shared_ptr<const LogitsBackend> inner_;
  mutable std::mutex mu_;
  mutable std::size_t evaluations_ = 0;
  mutable std::set<std::vector<TokenId>> contexts_;
};

struct Instance {
  std::string name;
  zoo::ModelPtr model;
  std::shared_ptr<const ppl::Program> program;
  std::shared_ptr<const LogitsBackend> backend;
  /// Exact Z and exact Z * E[length], from closed forms or a complete enumeration.
  double exact_z = 0.0;
  double exact_z_length = 0.0;
  /// A hard constraint (or fragment observation) rules out some continuations.
  bool constraint_binds = true;
  oracle::EnumerationLimits limits;
};

/// The six instances of the unbiasedness and Jensen suites: hard constraint
/// (plain, masked), infilling (with and without length correction), and
/// prompt intersection (single proposal, locally optimal).
std::vector<Instance> zoo_instances();

}  // namespace smcsteer::toy
