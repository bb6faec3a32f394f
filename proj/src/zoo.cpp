#include "smcsteer/zoo.hpp"

#include <algorithm>
#include <cmath>

namespace smcsteer::zoo {

// ---------------------------------------------------------------------------
// Constraints

void verify_prefix_closed(const PrefixConstraint::Predicate& allows, const Vocab& vocab, int depth) {
  const TokenId eos = vocab.eos();
  const auto v = static_cast<TokenId>(vocab.size());
  std::function<void(const Seq&, bool)> visit = [&](const Seq& s, bool parent_in) {
    const bool in = allows(s);
    if (in && !parent_in) {
      std::string shown;
      for (const auto& l : s.labels(vocab)) shown += (shown.empty() ? "" : " ") + l;
      throw NotPrefixClosed("constraint is not prefix-closed: [" + shown + "] is allowed but its prefix is not");
    }
    if (s.terminated() || static_cast<int>(s.size()) >= depth) return;
    for (TokenId t = 0; t < v; ++t) visit(s.appended(t), in);
  };
  visit(Seq(eos), true);
}

namespace {

// Deepest exhaustive check that stays within a fixed node budget.
int verification_depth(const Vocab& vocab) {
  constexpr double kBudget = 200000.0;
  const double v = static_cast<double>(vocab.size());
  int depth = 0;
  double nodes = 1.0;
  double level = 1.0;
  while (depth < 6) {
    level *= v;
    if (nodes + level > kBudget) break;
    nodes += level;
    ++depth;
  }
  return std::max(depth, 1);
}

}  // namespace

PrefixConstraint::PrefixConstraint(std::string name, Predicate allows, const Vocab& vocab)
    : name_(std::move(name)), allows_(std::move(allows)) {
  verify_prefix_closed(allows_, vocab, verification_depth(vocab));
}

PrefixConstraint PrefixConstraint::none(const Vocab& vocab) {
  return PrefixConstraint("none", [](const Seq&) { return true; }, vocab);
}

PrefixConstraint PrefixConstraint::forbid_tokens(const Vocab& vocab, std::set<TokenId> forbidden) {
  std::string name = "forbid(";
  bool first = true;
  for (TokenId t : forbidden) {
    name += (first ? "" : ",") + vocab.label(t);
    first = false;
  }
  name += ")";
  return PrefixConstraint(
      name,
      [forbidden = std::move(forbidden)](const Seq& s) {
        return std::none_of(s.ids().begin(), s.ids().end(), [&](TokenId t) { return forbidden.count(t) != 0; });
      },
      vocab);
}

PrefixConstraint PrefixConstraint::max_word_length(const Vocab& vocab, int max_len, std::string separator) {
  if (max_len < 1) throw std::invalid_argument("max word length must be >= 1");
  const TokenId sep = vocab.contains(separator) ? vocab.id(separator) : -2;
  const TokenId eos = vocab.eos();
  return PrefixConstraint(
      "max-word-length(" + std::to_string(max_len) + ")",
      [=](const Seq& s) {
        int run = 0;
        for (TokenId t : s.ids()) {
          if (t == sep || t == eos) {
            run = 0;
          } else if (++run > max_len) {
            return false;
          }
        }
        return true;
      },
      vocab);
}

PrefixConstraint PrefixConstraint::regular(const Vocab& vocab, Dfa dfa) {
  const auto n_states = dfa.transitions.size();
  if (dfa.start < 0 || static_cast<std::size_t>(dfa.start) >= n_states) throw std::invalid_argument("DFA start state out of range");
  // Live states: those from which an accepting state is reachable.
  std::vector<bool> live(n_states, false);
  for (int a : dfa.accepting)
    if (a >= 0 && static_cast<std::size_t>(a) < n_states) live[static_cast<std::size_t>(a)] = true;
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t q = 0; q < n_states; ++q) {
      if (live[q]) continue;
      for (const auto& [tok, r] : dfa.transitions[q]) {
        if (r >= 0 && static_cast<std::size_t>(r) < n_states && live[static_cast<std::size_t>(r)]) {
          live[q] = true;
          changed = true;
          break;
        }
      }
    }
  }
  const TokenId eos = vocab.eos();
  return PrefixConstraint(
      "regular",
      [dfa = std::move(dfa), live = std::move(live), eos](const Seq& s) {
        int q = dfa.start;
        for (TokenId t : s.ids()) {
          if (t == eos) return dfa.accepting.count(q) != 0;
          const auto& row = dfa.transitions[static_cast<std::size_t>(q)];
          auto it = row.find(t);
          if (it == row.end()) return false;
          q = it->second;
        }
        return static_cast<bool>(live[static_cast<std::size_t>(q)]);
      },
      vocab);
}

void InfillTemplate::validate() const {
  if (fragments.size() < 2) throw std::invalid_argument("infill template needs at least x0 and x1");
  for (std::size_t i = 0; i + 1 < fragments.size(); ++i)
    if (fragments[i].terminated()) throw std::invalid_argument("only the final infill fragment may contain EOS");
  if (!fragments.back().terminated()) throw std::invalid_argument("the final infill fragment must end in EOS");
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("hole-length parameter must lie in (0, 1]");
}

// ---------------------------------------------------------------------------
// Hand-written models

namespace {

class HardConstraintModel final : public FkModel {
 public:
  HardConstraintModel(Seq prompt, PrefixConstraint c, bool masked)
      : prompt_(std::move(prompt)), c_(std::move(c)), masked_(masked) {
    if (prompt_.terminated()) throw std::invalid_argument("prompt must not be EOS-terminated");
  }

  std::string name() const override {
    return std::string(masked_ ? "hard-constraint-masked" : "hard-constraint-plain") + "[" + c_.name() + "]";
  }
  State initial_state() const override { return State{Seq(prompt_.eos_id()), {}}; }

 protected:
  struct Masked {
    std::vector<double> proposal;  // log M'
    double log_mass;               // log G'
  };

  Masked mask(const Seq& s, const std::vector<double>& lp) const {
    Masked m{std::vector<double>(lp.size(), kNegInf), kNegInf};
    std::vector<double> kept;
    for (std::size_t w = 0; w < lp.size(); ++w)
      if (lp[w] > kNegInf && c_.allows(s.appended(static_cast<TokenId>(w)))) kept.push_back(lp[w]);
    m.log_mass = log_sum_exp(kept);
    if (m.log_mass == kNegInf) throw AllMasked(name() + ": no admissible token after a prefix of length " + std::to_string(s.size()));
    for (std::size_t w = 0; w < lp.size(); ++w)
      if (lp[w] > kNegInf && c_.allows(s.appended(static_cast<TokenId>(w)))) m.proposal[w] = lp[w] - m.log_mass;
    return m;
  }

  StepResult do_step(int, const State& state, Rng& rng, NextTokenSource& lm) const override {
    const auto lp = lm.next_logprobs(prompt_.ids(), state.seq.ids());
    if (!masked_) {
      const auto w = static_cast<TokenId>(rng.categorical_log(*lp));
      Seq next = state.seq.appended(w);
      const double g = c_.allows(next) ? 0.0 : kNegInf;
      return {State{std::move(next), state.user}, g};
    }
    const Masked m = mask(state.seq, *lp);
    const auto w = static_cast<TokenId>(rng.categorical_log(m.proposal));
    return {State{state.seq.appended(w), state.user}, m.log_mass};
  }

  EnumerableStep do_enumerate(int, const State& state, NextTokenSource& lm, const EnumerateOptions&) const override {
    EnumerableStep out;
    const auto lp = lm.next_logprobs(prompt_.ids(), state.seq.ids());
    if (!masked_) {
      for (std::size_t w = 0; w < lp->size(); ++w) {
        if ((*lp)[w] == kNegInf) continue;
        Seq next = state.seq.appended(static_cast<TokenId>(w));
        const double g = c_.allows(next) ? 0.0 : kNegInf;
        out.transitions.push_back({State{std::move(next), state.user}, std::exp((*lp)[w]), g});
      }
      return out;
    }
    const Masked m = mask(state.seq, *lp);
    for (std::size_t w = 0; w < m.proposal.size(); ++w) {
      if (m.proposal[w] == kNegInf) continue;
      out.transitions.push_back({State{state.seq.appended(static_cast<TokenId>(w)), state.user}, std::exp(m.proposal[w]), m.log_mass});
    }
    return out;
  }

 private:
  Seq prompt_;
  PrefixConstraint c_;
  bool masked_;
};

double geometric_log_prob(double p, std::int64_t k) {
  if (p == 1.0) return k == 0 ? 0.0 : kNegInf;
  return std::log(p) + static_cast<double>(k) * std::log1p(-p);
}

class InfillModel final : public FkModel {
 public:
  InfillModel(InfillTemplate tmpl, bool correction) : tmpl_(std::move(tmpl)), correction_(correction) { tmpl_.validate(); }

  std::string name() const override { return correction_ ? "infill" : "infill-length-prior"; }
  State initial_state() const override { return State{tmpl_.fragments.front(), {}}; }
  // With the correction, intermediate fragments can make the expected step
  // potential exceed one; no finite bound is claimed then.
  double tail_factor() const override {
    return correction_ && tmpl_.fragments.size() > 2 ? std::numeric_limits<double>::infinity() : 1.0;
  }

 protected:
  const Seq& fragment(int t) const {
    if (t < 1 || static_cast<std::size_t>(t) >= tmpl_.fragments.size()) throw ContractViolation("infill step index out of range");
    return tmpl_.fragments[static_cast<std::size_t>(t)];
  }

  // Appends the fragment for step t, observing each of its tokens.
  double observe_fragment(int t, Seq& s, NextTokenSource& lm) const {
    double lp = 0.0;
    for (TokenId x : fragment(t).ids()) {
      lp += (*lm.next_logprobs(s))[static_cast<std::size_t>(x)];
      s = s.appended(x);
    }
    return lp;
  }

  StepResult do_step(int t, const State& state, Rng& rng, NextTokenSource& lm) const override {
    std::int64_t k = 0;
    if (tmpl_.p < 1.0) k = static_cast<std::int64_t>(std::floor(std::log1p(-rng.uniform()) / std::log1p(-tmpl_.p)));
    double logg = correction_ ? -geometric_log_prob(tmpl_.p, k) : 0.0;
    Seq s = state.seq;
    for (std::int64_t i = 0; i < k; ++i) {
      const auto w = static_cast<TokenId>(rng.categorical_log(*lm.next_logprobs(s)));
      s = s.appended(w);
      if (w == s.eos_id()) return {State{std::move(s), state.user}, kNegInf};
    }
    logg += observe_fragment(t, s, lm);
    return {State{std::move(s), state.user}, logg};
  }

  EnumerableStep do_enumerate(int t, const State& state, NextTokenSource& lm, const EnumerateOptions& opts) const override {
    EnumerableStep out;
    const std::int64_t cap = tmpl_.p < 1.0 ? opts.support_cap : 0;
    out.truncated = tmpl_.p < 1.0;
    for (std::int64_t k = 0; k <= cap; ++k) {
      const double log_len = geometric_log_prob(tmpl_.p, k);
      const double corr = correction_ ? -log_len : 0.0;
      // Depth-first over hole contents of length k.
      std::function<void(const Seq&, std::int64_t, double)> fill = [&](const Seq& s, std::int64_t i, double log_q) {
        if (i == k) {
          Seq done = s;
          const double obs = observe_fragment(t, done, lm);
          out.transitions.push_back({State{std::move(done), state.user}, std::exp(log_q), corr + obs});
          return;
        }
        const auto lp = lm.next_logprobs(s);
        for (std::size_t w = 0; w < lp->size(); ++w) {
          if ((*lp)[w] == kNegInf) continue;
          Seq next = s.appended(static_cast<TokenId>(w));
          if (next.terminated()) {
            out.transitions.push_back({State{std::move(next), state.user}, std::exp(log_q + (*lp)[w]), kNegInf});
          } else {
            fill(next, i + 1, log_q + (*lp)[w]);
          }
        }
      };
      fill(state.seq, 0, log_len);
    }
    return out;
  }

 private:
  InfillTemplate tmpl_;
  bool correction_;
};

class IntersectModel final : public FkModel {
 public:
  IntersectModel(std::vector<Seq> prompts, bool locally_optimal) : prompts_(std::move(prompts)), lo_(locally_optimal) {
    if (prompts_.empty()) throw std::invalid_argument("intersect needs at least one prompt");
    for (const auto& p : prompts_)
      if (p.terminated()) throw std::invalid_argument("prompts must not be EOS-terminated");
  }

  std::string name() const override { return lo_ ? "intersect-locally-optimal" : "intersect-single-proposal"; }
  State initial_state() const override { return State{Seq(prompts_.front().eos_id()), {}}; }

 protected:
  struct Proposal {
    std::vector<double> log_q;
    std::vector<double> log_g;  // per token
  };

  Proposal proposal(const Seq& s, NextTokenSource& lm) const {
    std::vector<LogProbs> lps;
    lps.reserve(prompts_.size());
    for (const auto& x : prompts_) lps.push_back(lm.next_logprobs(x.ids(), s.ids()));
    const std::size_t v = lps.front()->size();
    Proposal out{std::vector<double>(v), std::vector<double>(v)};
    if (!lo_) {
      out.log_q = *lps.front();
      for (std::size_t w = 0; w < v; ++w) {
        double g = 0.0;
        for (std::size_t i = 1; i < lps.size(); ++i) g += (*lps[i])[w];
        out.log_g[w] = g;
      }
      return out;
    }
    std::vector<double> log_prod(v, 0.0);
    for (std::size_t w = 0; w < v; ++w)
      for (const auto& lp : lps) log_prod[w] += (*lp)[w];
    const double log_norm = log_sum_exp(log_prod);
    if (log_norm == kNegInf) throw AllMasked(name() + ": prompts share no next token");
    for (std::size_t w = 0; w < v; ++w) {
      out.log_q[w] = log_prod[w] == kNegInf ? kNegInf : log_prod[w] - log_norm;
      out.log_g[w] = log_norm;
    }
    return out;
  }

  StepResult do_step(int, const State& state, Rng& rng, NextTokenSource& lm) const override {
    const Proposal p = proposal(state.seq, lm);
    const auto w = rng.categorical_log(p.log_q);
    return {State{state.seq.appended(static_cast<TokenId>(w)), state.user}, p.log_g[w]};
  }

  EnumerableStep do_enumerate(int, const State& state, NextTokenSource& lm, const EnumerateOptions&) const override {
    const Proposal p = proposal(state.seq, lm);
    EnumerableStep out;
    for (std::size_t w = 0; w < p.log_q.size(); ++w) {
      if (p.log_q[w] == kNegInf) continue;
      out.transitions.push_back({State{state.seq.appended(static_cast<TokenId>(w)), state.user}, std::exp(p.log_q[w]), p.log_g[w]});
    }
    return out;
  }

 private:
  std::vector<Seq> prompts_;
  bool lo_;
};

// ---------------------------------------------------------------------------
// PPL programs

class HardConstraintProgram final : public ppl::Program {
 public:
  HardConstraintProgram(Seq prompt, PrefixConstraint c, bool masked)
      : prompt_(std::move(prompt)), c_(std::move(c)), masked_(masked) {}

  std::string name() const override { return masked_ ? "hard-constraint-masked" : "hard-constraint-plain"; }
  State initial_state() const override { return State{Seq(prompt_.eos_id()), {}}; }

  void step(ppl::Runtime& self) const override {
    const ppl::Dist next = self.transformer(prompt_, self.s());
    if (!masked_) {
      const auto w = static_cast<TokenId>(self.sample(next));
      self.s() = self.s().appended(w);
      self.condition(c_.allows(self.s()));
      return;
    }
    // Proposal: the next-token law restricted to admissible tokens.
    const std::size_t v = self.vocab().size();
    std::vector<double> masked(v, kNegInf);
    for (std::size_t w = 0; w < v; ++w) {
      const double lp = next.log_prob(static_cast<std::int64_t>(w));
      if (lp > kNegInf && c_.allows(self.s().appended(static_cast<TokenId>(w)))) masked[w] = lp;
    }
    const double mass = log_sum_exp(masked);
    if (mass == kNegInf) throw AllMasked(name() + ": no admissible token");
    for (double& lp : masked)
      if (lp > kNegInf) lp -= mass;
    const auto w = static_cast<TokenId>(self.sample(next, ppl::Dist::categorical_log(std::move(masked))));
    self.s() = self.s().appended(w);
  }

 private:
  Seq prompt_;
  PrefixConstraint c_;
  bool masked_;
};

void observe_with(ppl::Runtime& self, const ppl::Dist& d, std::int64_t value, ObserveStyle style) {
  if (style == ObserveStyle::kObserve) {
    self.observe(d, value);
  } else {
    const std::int64_t v = self.sample(d, ppl::Dist::dirac(value));
    self.condition(v == value);
  }
}

class InfillProgram final : public ppl::Program {
 public:
  InfillProgram(InfillTemplate tmpl, bool correction, ObserveStyle style)
      : tmpl_(std::move(tmpl)), correction_(correction), style_(style) {
    tmpl_.validate();
  }

  std::string name() const override { return correction_ ? "infill" : "infill-length-prior"; }
  State initial_state() const override { return State{tmpl_.fragments.front(), {}}; }

  void step(ppl::Runtime& self) const override {
    const auto t = static_cast<std::size_t>(self.t());
    if (t >= tmpl_.fragments.size()) throw ContractViolation("infill program stepped past its last fragment");
    const auto lengths = ppl::Dist::geometric(tmpl_.p);
    // Drawing the hole length against the flat measure leaves exactly the
    // inverse geometric density in the potential.
    const std::int64_t k = correction_ ? self.sample(ppl::Dist::flat(), lengths) : self.sample(lengths);
    for (std::int64_t i = 0; i < k; ++i) {
      const auto w = static_cast<TokenId>(self.sample(self.transformer(self.s())));
      if (w == self.eos()) {
        self.condition(false);
        self.finish();
        return;
      }
      self.s() = self.s().appended(w);
    }
    for (TokenId x : tmpl_.fragments[t].ids()) {
      observe_with(self, self.transformer(self.s()), x, style_);
      self.s() = self.s().appended(x);
    }
  }

 private:
  InfillTemplate tmpl_;
  bool correction_;
  ObserveStyle style_;
};

class IntersectProgram final : public ppl::Program {
 public:
  IntersectProgram(std::vector<Seq> prompts, bool locally_optimal, ObserveStyle style)
      : prompts_(std::move(prompts)), lo_(locally_optimal), style_(style) {
    if (prompts_.empty()) throw std::invalid_argument("intersect needs at least one prompt");
  }

  std::string name() const override { return lo_ ? "intersect-locally-optimal" : "intersect-single-proposal"; }
  State initial_state() const override { return State{Seq(prompts_.front().eos_id()), {}}; }

  void step(ppl::Runtime& self) const override {
    std::vector<ppl::Dist> experts;
    experts.reserve(prompts_.size());
    for (const auto& x : prompts_) experts.push_back(self.transformer(x, self.s()));

    TokenId w = 0;
    if (!lo_) {
      w = static_cast<TokenId>(self.sample(experts.front()));
    } else {
      const std::size_t v = self.vocab().size();
      std::vector<double> log_prod(v, 0.0);
      for (std::size_t tok = 0; tok < v; ++tok)
        for (const auto& e : experts) log_prod[tok] += e.log_prob(static_cast<std::int64_t>(tok));
      const double log_norm = log_sum_exp(log_prod);
      if (log_norm == kNegInf) throw AllMasked(name() + ": prompts share no next token");
      for (double& lp : log_prod)
        if (lp > kNegInf) lp -= log_norm;
      w = static_cast<TokenId>(self.sample(experts.front(), ppl::Dist::categorical_log(std::move(log_prod))));
    }
    for (std::size_t i = 1; i < experts.size(); ++i) observe_with(self, experts[i], w, style_);
    self.s() = self.s().appended(w);
  }

 private:
  std::vector<Seq> prompts_;
  bool lo_;
  ObserveStyle style_;
};

}  // namespace

ModelPtr hard_constraint_plain(Seq prompt, PrefixConstraint c) {
  return std::make_shared<HardConstraintModel>(std::move(prompt), std::move(c), false);
}

ModelPtr hard_constraint_masked(Seq prompt, PrefixConstraint c) {
  return std::make_shared<HardConstraintModel>(std::move(prompt), std::move(c), true);
}

ModelPtr infill(InfillTemplate tmpl, bool length_correction) {
  return std::make_shared<InfillModel>(std::move(tmpl), length_correction);
}

ModelPtr intersect(std::vector<Seq> prompts, bool locally_optimal) {
  return std::make_shared<IntersectModel>(std::move(prompts), locally_optimal);
}

std::shared_ptr<const ppl::Program> hard_constraint_program(Seq prompt, PrefixConstraint c, bool masked) {
  return std::make_shared<HardConstraintProgram>(std::move(prompt), std::move(c), masked);
}

std::shared_ptr<const ppl::Program> infill_program(InfillTemplate tmpl, bool length_correction, ObserveStyle style) {
  return std::make_shared<InfillProgram>(std::move(tmpl), length_correction, style);
}

std::shared_ptr<const ppl::Program> intersect_program(std::vector<Seq> prompts, bool locally_optimal, ObserveStyle style) {
  return std::make_shared<IntersectProgram>(std::move(prompts), locally_optimal, style);
}

// ---------------------------------------------------------------------------
// Baselines

GreedyOutcome greedy_masked_decode(const Seq& prompt, const PrefixConstraint& c, NextTokenSource& lm, Rng& rng,
                                   int max_len) {
  GreedyOutcome out{Seq(prompt.eos_id()), false};
  while (!out.completion.terminated() && static_cast<int>(out.completion.size()) < max_len) {
    const auto lp = lm.next_logprobs(prompt.ids(), out.completion.ids());
    std::vector<double> masked(lp->size(), kNegInf);
    bool any = false;
    for (std::size_t w = 0; w < lp->size(); ++w) {
      if ((*lp)[w] > kNegInf && c.allows(out.completion.appended(static_cast<TokenId>(w)))) {
        masked[w] = (*lp)[w];
        any = true;
      }
    }
    if (!any) {
      out.dead_end = true;
      return out;
    }
    out.completion = out.completion.appended(static_cast<TokenId>(rng.categorical_log(masked)));
  }
  return out;
}

BeamResult beam_search(const FkModel& model, NextTokenSource& lm, std::size_t beam_size, int max_steps,
                       const EnumerateOptions& opts) {
  if (beam_size < 1) throw std::invalid_argument("beam size must be >= 1");
  BeamResult result{Hypothesis{Seq(lm.vocab().eos()), kNegInf}, {}, false};

  struct Live {
    State state;
    double score;
  };
  std::vector<Live> beam;
  State s0 = model.initial_state();
  if (s0.terminated()) {
    result.finished.push_back({s0.seq, 0.0});
  } else {
    beam.push_back({std::move(s0), 0.0});
  }

  for (int t = 1; t <= max_steps && !beam.empty(); ++t) {
    std::vector<Live> candidates;
    for (const auto& h : beam) {
      for (auto& tr : model.enumerate(t, h.state, lm, opts).transitions) {
        const double score = h.score + std::log(tr.prob) + tr.log_potential;
        if (score == kNegInf) continue;
        candidates.push_back({std::move(tr.next), score});
      }
    }
    // Highest score first; ties broken by sequence for reproducibility.
    std::sort(candidates.begin(), candidates.end(), [](const Live& a, const Live& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.state.seq < b.state.seq;
    });
    if (candidates.size() > beam_size) candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(beam_size), candidates.end());
    beam.clear();
    for (auto& c : candidates) {
      if (c.state.terminated()) {
        result.finished.push_back({std::move(c.state.seq), c.score});
      } else {
        beam.push_back(std::move(c));
      }
    }
  }
  std::sort(result.finished.begin(), result.finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.seq < b.seq;
  });
  if (!result.finished.empty()) {
    result.best = result.finished.front();
    result.found = true;
  }
  return result;
}

}  // namespace smcsteer::zoo
