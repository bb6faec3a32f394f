#include <gtest/gtest.h>

#include <map>

#include "smcsteer/backend.hpp"
#include "smcsteer/cache.hpp"
#include "smcsteer/toy.hpp"
#include "smcsteer/zoo.hpp"

using namespace smcsteer;

namespace {

const Vocab& abe() {
  static const Vocab v = toy::abe_vocab();
  return v;
}

}  // namespace

TEST(Vocab, CharactersAreSortedWithEosLast) {
  const auto v = Vocab::from_characters("bab");
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v.label(0), "a");
  EXPECT_EQ(v.label(1), "b");
  EXPECT_EQ(v.label(v.eos()), "<eos>");
  EXPECT_EQ(v.id("b"), 1);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("c"));
  EXPECT_THROW(v.id("c"), std::out_of_range);
  EXPECT_THROW(v.label(7), std::out_of_range);
}

TEST(Vocab, RejectsBadConstruction) {
  EXPECT_THROW(Vocab({"a", "a", "<eos>"}, "<eos>"), std::invalid_argument);
  EXPECT_THROW(Vocab({"a", "b"}, "<eos>"), std::invalid_argument);
  EXPECT_THROW(Vocab({"<eos>"}, "<eos>"), std::invalid_argument);
}

TEST(Vocab, MultibyteCharactersAreOneToken) {
  const auto parts = split_characters("aé€");
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[1], "é");
  EXPECT_EQ(parts[2], "€");
}

TEST(Seq, AppendToEmpty) {
  const auto s = Seq::empty(abe()).appended(abe().id("a"));
  EXPECT_EQ(s.to_text(abe()), "a");
  EXPECT_FALSE(s.terminated());
}

TEST(Seq, AppendEosTerminates) {
  const auto s = Seq::from_text(abe(), "a").appended(abe().eos());
  EXPECT_EQ(s.size(), 2u);
  EXPECT_TRUE(s.terminated());
}

TEST(Seq, AppendAfterEosIsAContractViolation) {
  const auto s = Seq::from_text(abe(), "a").appended(abe().eos());
  EXPECT_THROW((void)s.appended(abe().id("b")), ContractViolation);
}

TEST(Seq, EosOnlyAtTheEnd) {
  const TokenId e = abe().eos();
  EXPECT_THROW(Seq(e, {0, e, 1}), ContractViolation);
  EXPECT_NO_THROW(Seq(e, {0, 1, e}));
}

TEST(Seq, OrderingAndHashAreValueBased) {
  const auto x = Seq::from_text(abe(), "ab");
  const auto y = Seq::empty(abe()).appended(0).appended(1);
  EXPECT_EQ(x, y);
  EXPECT_EQ(SeqHash{}(x), SeqHash{}(y));
  EXPECT_LT(Seq::from_text(abe(), "a"), x);
}

TEST(Rng, SubstreamsAreDeterministicAndDistinct) {
  auto a = Rng::substream(7, 3, kExpandTag, 2);
  auto b = Rng::substream(7, 3, kExpandTag, 2);
  auto c = Rng::substream(7, 3, kExpandTag, 3);
  auto d = Rng::substream(7, 3, kResampleTag, 2);
  const auto xa = a.next_u64();
  EXPECT_EQ(xa, b.next_u64());
  EXPECT_NE(xa, c.next_u64());
  EXPECT_NE(xa, d.next_u64());
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, CategoricalLogSkipsZeroMass) {
  Rng r(2);
  const std::vector<double> lp{kNegInf, std::log(0.25), std::log(0.75), kNegInf};
  std::array<int, 4> counts{};
  const int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[r.categorical_log(lp)];
  EXPECT_EQ(counts[0], 0);
  EXPECT_EQ(counts[3], 0);
  EXPECT_NEAR(counts[1] / double(n), 0.25, 3 * std::sqrt(0.25 * 0.75 / n));
}

TEST(LogSumExp, HandlesInfinities) {
  const std::vector<double> all_dead{kNegInf, kNegInf};
  EXPECT_EQ(log_sum_exp(all_dead), kNegInf);
  const std::vector<double> big{1000.0, 1000.0};
  EXPECT_NEAR(log_sum_exp(big), 1000.0 + std::log(2.0), 1e-12);
  EXPECT_EQ(log_add_exp(kNegInf, 3.0), 3.0);
  EXPECT_NEAR(log_add_exp(0.0, 0.0), std::log(2.0), 1e-15);
}

TEST(FkStep, NoBStepFrequencies) {
  const auto backend = toy::uniform_abe();
  const auto c = zoo::PrefixConstraint::forbid_tokens(abe(), {abe().id("b")});
  const auto model = zoo::hard_constraint_plain(Seq::empty(abe()), c);
  TrieCache cache(*backend);
  const State s0 = model->initial_state();
  std::map<std::string, int> counts;
  const int n = 100000;
  Rng rng(11);
  for (int i = 0; i < n; ++i) {
    const auto r = model->step(1, s0, rng, cache);
    const auto text = r.next.seq.to_text(abe());
    ++counts[text];
    if (text == "b") {
      ASSERT_EQ(r.log_potential, kNegInf);
    } else {
      ASSERT_EQ(r.log_potential, 0.0);
    }
  }
  const double se = std::sqrt((1.0 / 3) * (2.0 / 3) / n);
  for (const auto& key : {"a", "b", ""}) EXPECT_NEAR(counts[key] / double(n), 1.0 / 3, 3 * se) << key;
}

TEST(FkStep, TerminalStateIsAContractViolation) {
  const auto backend = toy::uniform_abe();
  const auto model = zoo::hard_constraint_plain(Seq::empty(abe()), zoo::PrefixConstraint::none(abe()));
  TrieCache cache(*backend);
  State done{Seq::from_text(abe(), "a").appended(abe().eos()), {}};
  Rng rng(0);
  EXPECT_THROW(model->step(1, done, rng, cache), ContractViolation);
  EXPECT_THROW(model->enumerate(1, done, cache), ContractViolation);
  EXPECT_THROW(model->step(0, model->initial_state(), rng, cache), ContractViolation);
}

TEST(FkStep, UnitPotentialIsZeroEverywhere) {
  const auto backend = toy::uniform_abe();
  const auto model = zoo::hard_constraint_plain(Seq::empty(abe()), zoo::PrefixConstraint::none(abe()));
  TrieCache cache(*backend);
  const auto e = model->enumerate(1, model->initial_state(), cache);
  ASSERT_EQ(e.transitions.size(), 3u);
  for (const auto& tr : e.transitions) EXPECT_EQ(tr.log_potential, 0.0);
}

// The sampled law of every zoo model's kernel matches its enumeration, and
// sampled potentials agree with the enumerated ones.
TEST(FkStep, SamplingMatchesEnumeration) {
  const auto instances = toy::zoo_instances();
  const int n = 20000;
  for (const auto& inst : instances) {
    TrieCache cache(*inst.backend);
    std::vector<State> frontier{inst.model->initial_state()};
    EnumerateOptions opts;
    opts.support_cap = 7;
    for (int t = 1; t <= 2 && !frontier.empty(); ++t) {
      std::vector<State> next_frontier;
      for (const auto& st : frontier) {
        const auto e = inst.model->enumerate(t, st, cache, opts);
        // Outcomes are (string, potential): the same string can arise with
        // different potentials (a hole that emits EOS versus the closing fragment).
        auto pot_key = [](double lp) { return lp == kNegInf ? std::numeric_limits<long long>::min() : std::llround(lp * 1e9); };
        using Outcome = std::pair<Seq, long long>;
        std::map<Outcome, double> law;
        for (const auto& tr : e.transitions) {
          law[{tr.next.seq, pot_key(tr.log_potential)}] += tr.prob;
          if (!tr.next.terminated() && tr.prob > 0.05 && tr.next.seq.size() <= 4) next_frontier.push_back(tr.next);
        }
        std::map<Outcome, int> counts;
        int beyond_cap = 0;
        Rng rng(Rng::substream(5, static_cast<std::uint64_t>(t), 9, frontier.size()).next_u64());
        for (int i = 0; i < n; ++i) {
          const auto r = inst.model->step(t, st, rng, cache);
          const Outcome key{r.next.seq, pot_key(r.log_potential)};
          if (!law.contains(key)) {
            ASSERT_TRUE(e.truncated) << inst.name << ": sampled a transition outside the enumerated support";
            ++beyond_cap;
            continue;
          }
          ++counts[key];
        }
        double covered = 0.0;
        for (const auto& [key, p] : law) {
          covered += p;
          const double se = std::sqrt(std::max(p * (1 - p), 1e-12) / n);
          EXPECT_NEAR(counts[key] / double(n), p, 3.5 * se + 1e-4) << inst.name << " t=" << t;
        }
        // Long holes that hit EOS early land on enumerated strings, so only an
        // upper bound holds for draws outside the enumeration.
        const double rest = std::max(0.0, 1.0 - covered);
        EXPECT_LE(beyond_cap / double(n), rest + 3.5 * std::sqrt(std::max(rest * (1 - rest), 1e-12) / n) + 1e-4)
            << inst.name;
      }
      frontier = std::move(next_frontier);
      if (frontier.size() > 3) frontier.erase(frontier.begin() + 3, frontier.end());
    }
  }
}
