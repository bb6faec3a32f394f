#include "smcsteer/toy.hpp"

#include <functional>

namespace smcsteer::toy {

Vocab abe_vocab() { return Vocab::from_characters("ab"); }

std::shared_ptr<const LogitsBackend> uniform_abe() { return std::make_shared<UniformBackend>(abe_vocab()); }

std::shared_ptr<const LogitsBackend> eos_heavy_abe() {
  return std::make_shared<TableBackend>(TableBackend::from_probabilities(abe_vocab(), {}, std::vector<double>{0.2, 0.2, 0.6}));
}

Evaluation CountingBackend::evaluate(std::span<const TokenId> context, const BackendState* prefix_state) const {
  {
    std::lock_guard lock(mu_);
    ++evaluations_;
    contexts_.emplace(context.begin(), context.end());
  }
  return inner_->evaluate(context, prefix_state);
}

std::size_t CountingBackend::evaluations() const {
  std::lock_guard lock(mu_);
  return evaluations_;
}

std::size_t CountingBackend::distinct_contexts() const {
  std::lock_guard lock(mu_);
  return contexts_.size();
}

Trap trap() {
  Vocab v({"a", "b", "c", "<eos>"}, "<eos>");
  const TokenId a = v.id("a"), b = v.id("b");
  std::map<std::vector<TokenId>, std::vector<double>> rows{
      {{}, {0.7, 0.3, 0.0, 0.0}},
      {{a}, {0.0, 0.0, 1.0, 0.0}},
      {{b}, {0.0, 0.0, 0.0, 1.0}},
  };
  auto backend = std::make_shared<TableBackend>(TableBackend::from_probabilities(v, rows));
  auto c = zoo::PrefixConstraint::forbid_tokens(v, {v.id("c")});
  return Trap{std::move(backend), std::move(c), 0.7};
}

IntersectToy intersect_toy(int depth, double agree, double disagree) {
  Vocab v = abe_vocab();
  const TokenId a = v.id("a"), b = v.id("b");
  const double stop = std::max(0.0, 1.0 - agree - disagree);
  if (depth < 1 || stop < -1e-12) throw std::invalid_argument("intersect_toy: bad parameters");
  std::map<std::vector<TokenId>, std::vector<double>> rows;
  std::function<void(std::vector<TokenId>, int, bool)> fill = [&](std::vector<TokenId> ctx, int len, bool first_a) {
    if (len == depth) {
      rows[ctx] = {0.0, 0.0, 1.0};
      return;
    }
    rows[ctx] = first_a ? std::vector<double>{agree, disagree, stop} : std::vector<double>{disagree, agree, stop};
    for (TokenId t : {a, b}) {
      auto next = ctx;
      next.push_back(t);
      fill(next, len + 1, first_a);
    }
  };
  fill({a}, 0, true);
  fill({b}, 0, false);
  auto backend = std::make_shared<TableBackend>(TableBackend::from_probabilities(v, rows));
  return IntersectToy{std::move(backend), {Seq(v.eos(), {a}), Seq(v.eos(), {b})}};
}

std::vector<Instance> zoo_instances() {
  std::vector<Instance> out;
  const Vocab v = abe_vocab();
  const auto uniform = uniform_abe();
  const auto no_b = zoo::PrefixConstraint::forbid_tokens(v, {v.id("b")});
  const Seq empty(v.eos());

  // Hard constraint "no b" on the uniform backend: mass 3^-(k+1) on a^k EOS,
  // so Z = 1/2 and Z E[len] = sum_j j 3^-j = 3/4.
  oracle::EnumerationLimits hc_limits;
  hc_limits.length_cap = 24;
  out.push_back({"hard-constraint-plain", zoo::hard_constraint_plain(empty, no_b),
                 zoo::hard_constraint_program(empty, no_b, false), uniform, 0.5, 0.75, true, hc_limits});
  out.push_back({"hard-constraint-masked", zoo::hard_constraint_masked(empty, no_b),
                 zoo::hard_constraint_program(empty, no_b, true), uniform, 0.5, 0.75, true, hc_limits});

  // Infill x0 = [], x1 = [b, EOS] on the EOS-heavy backend. A hole of length
  // k survives with mass 0.4^k and x1 then has probability 0.12. With the
  // correction, Z = 0.12 / 0.6 = 1/5 and Z E[len] = 0.12 sum (k+2) 0.4^k = 8/15.
  // Without it the weights gain 2^-(k+1): Z = 0.075, Z E[len] = 0.16875.
  // (On the uniform backend the corrected weights have infinite variance.)
  const auto heavy = eos_heavy_abe();
  zoo::InfillTemplate tmpl{{empty, Seq(v.eos(), {v.id("b"), v.eos()})}, 0.5};
  oracle::EnumerationLimits in_limits;
  in_limits.length_cap = 64;
  in_limits.step.support_cap = 12;
  out.push_back({"infill", zoo::infill(tmpl, true), zoo::infill_program(tmpl, true), heavy, 0.2, 8.0 / 15.0, true,
                 in_limits});
  out.push_back({"infill-length-prior", zoo::infill(tmpl, false), zoo::infill_program(tmpl, false), heavy, 0.075,
                 0.16875, true, in_limits});

  // Intersection on a finite table: the enumeration is complete.
  const IntersectToy it = intersect_toy();
  oracle::EnumerationLimits it_limits;
  it_limits.length_cap = 16;
  for (bool lo : {false, true}) {
    auto model = zoo::intersect(it.prompts, lo);
    TrieCache cache(*it.backend);
    const auto post = oracle::enumerate_posterior(*model, cache, it_limits);
    out.push_back({lo ? "intersect-locally-optimal" : "intersect-single-proposal", model,
                   zoo::intersect_program(it.prompts, lo), it.backend, post.z(), post.integrate(oracle::seq_length),
                   false, it_limits});
  }
  return out;
}

}  // namespace smcsteer::toy
