#include <gtest/gtest.h>

#include <set>

#include "smcsteer/oracle.hpp"
#include "smcsteer/smc.hpp"
#include "smcsteer/toy.hpp"
#include "smcsteer/zoo.hpp"

using namespace smcsteer;

namespace {

// Appends `a` with a fixed potential; stops after `length` tokens (or never).
class FixedModel final : public FkModel {
 public:
  FixedModel(int length, double log_g, bool start_terminal = false)
      : length_(length), log_g_(log_g), start_terminal_(start_terminal) {}
  std::string name() const override { return "fixed"; }
  State initial_state() const override {
    Seq s(2);
    return State{start_terminal_ ? s.appended(2) : s, {}};
  }

 protected:
  StepResult do_step(int, const State& state, Rng&, NextTokenSource&) const override {
    const bool stop = length_ >= 0 && static_cast<int>(state.seq.size()) + 1 >= length_;
    return {State{state.seq.appended(stop ? 2 : 0), {}}, log_g_};
  }
  EnumerableStep do_enumerate(int t, const State& state, NextTokenSource& lm, const EnumerateOptions&) const override {
    Rng unused(0);
    auto r = do_step(t, state, unused, lm);
    return {{Transition{std::move(r.next), 1.0, r.log_potential}}, false};
  }

 private:
  int length_;
  double log_g_;
  bool start_terminal_;
};

Seq empty_abe() { return Seq::empty(toy::abe_vocab()); }

zoo::ModelPtr no_b_plain() {
  const auto v = toy::abe_vocab();
  return zoo::hard_constraint_plain(empty_abe(), zoo::PrefixConstraint::forbid_tokens(v, {v.id("b")}));
}

std::vector<Particle> weighted(const std::vector<double>& w) {
  std::vector<Particle> out;
  for (std::size_t i = 0; i < w.size(); ++i)
    out.push_back(Particle{State{empty_abe().concat(std::vector<TokenId>(i, 0)), {}}, w[i] > 0 ? std::log(w[i]) : kNegInf});
  return out;
}

}  // namespace

TEST(FindCstar, ThreeWeightsTwoSlots) {
  const std::vector<double> w{0.5, 0.3, 0.2};
  const auto c = find_cstar(w, 2);
  ASSERT_TRUE(c);
  EXPECT_NEAR(*c, 2.0, 1e-12);
  // Grid check: the sum first exceeds 2 just above c = 2.
  auto sum = [&](double x) {
    double s = 0;
    for (double wi : w) s += std::min(1.0, x * wi);
    return s;
  };
  for (double x = 0.01; x < 4.0; x += 0.01) {
    if (x < 2.0 - 1e-9) EXPECT_LE(sum(x), 2.0 + 1e-12) << x;
    if (x > 2.0 + 1e-9) EXPECT_GT(sum(x), 2.0) << x;
  }
}

TEST(FindCstar, UniformWeights) {
  const std::vector<double> w(5, 0.2);
  EXPECT_NEAR(*find_cstar(w, 3), 3.0, 1e-12);
}

TEST(FindCstar, TooFewPositiveWeights) {
  const std::vector<double> w{1.0, 0.0, 0.0};
  EXPECT_FALSE(find_cstar(w, 1));
  const std::vector<double> two{0.5, 0.5, 0.0};
  EXPECT_FALSE(find_cstar(two, 2));
  EXPECT_TRUE(find_cstar(two, 1));
}

TEST(FindCstar, RejectsUnnormalizedWeights) {
  const std::vector<double> w{0.5, 0.3};
  EXPECT_THROW(find_cstar(w, 1), ContractViolation);
  const std::vector<double> neg{1.5, -0.5};
  EXPECT_THROW(find_cstar(neg, 1), ContractViolation);
}

TEST(FindCstar, MatchesBisectionOnRandomWeights) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 2 + rng.next_u64() % 12;
    std::vector<double> w(m);
    double s = 0;
    for (auto& x : w) s += (x = std::pow(rng.uniform(), 3.0) + 1e-6);
    for (auto& x : w) x /= s;
    const std::size_t n = 1 + rng.next_u64() % (m - 1);
    const double c = *find_cstar(w, n);
    auto sum = [&](double x) {
      double t = 0;
      for (double wi : w) t += std::min(1.0, x * wi);
      return t;
    };
    double lo = 0, hi = 1e9;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (sum(mid) > static_cast<double>(n) ? hi : lo) = mid;
    }
    EXPECT_NEAR(c, hi, 1e-6 * hi) << "m=" << m << " n=" << n;
  }
}

TEST(Select, InclusionProbabilities) {
  const std::vector<double> w{0.5, 0.3, 0.2};
  const int runs = 100000;
  std::array<int, 3> hits{};
  Rng rng(1);
  for (int r = 0; r < runs; ++r) {
    const auto sel = select_without_replacement(w, 2, rng);
    ASSERT_EQ(sel.deterministic, std::vector<std::size_t>{0});
    ASSERT_EQ(sel.stratified.size(), 1u);
    for (auto i : sel.deterministic) ++hits[i];
    for (auto i : sel.stratified) ++hits[i];
  }
  EXPECT_EQ(hits[0], runs);
  const double se = std::sqrt(0.6 * 0.4 / runs);
  EXPECT_NEAR(hits[1] / double(runs), 0.6, 3 * se);
  EXPECT_NEAR(hits[2] / double(runs), 0.4, 3 * se);
}

TEST(Select, UniformWeightsAreEquallyLikely) {
  const std::vector<double> w(6, 1.0 / 6);
  const int runs = 100000;
  std::array<int, 6> hits{};
  Rng rng(2);
  for (int r = 0; r < runs; ++r) {
    const auto sel = select_without_replacement(w, 3, rng);
    ASSERT_TRUE(sel.deterministic.empty());
    ASSERT_EQ(sel.stratified.size(), 3u);
    for (auto i : sel.stratified) ++hits[i];
  }
  const double se = std::sqrt(0.25 / runs);
  for (int h : hits) EXPECT_NEAR(h / double(runs), 0.5, 3 * se);
}

TEST(Select, DistinctAndExactlyN) {
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t m = 2 + rng.next_u64() % 20;
    std::vector<double> w(m);
    double s = 0;
    for (auto& x : w) s += (x = rng.uniform() < 0.2 ? 0.0 : std::exp(8 * rng.uniform()));
    if (s == 0) continue;
    for (auto& x : w) x /= s;
    const std::size_t n = 1 + rng.next_u64() % m;
    const auto sel = select_without_replacement(w, n, rng);
    std::set<std::size_t> all(sel.deterministic.begin(), sel.deterministic.end());
    all.insert(sel.stratified.begin(), sel.stratified.end());
    ASSERT_EQ(all.size(), sel.deterministic.size() + sel.stratified.size());
    for (auto i : all) ASSERT_GT(w[i], 0.0);
    const auto positive = static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double x) { return x > 0; }));
    ASSERT_EQ(all.size(), std::min(n, positive));
    ASSERT_EQ(sel.keep_all, positive <= n);
  }
}

TEST(Select, TieAtOneIsDeterministic) {
  // c* = 2 and 2 * 0.5 = 1 exactly.
  const std::vector<double> w{0.5, 0.25, 0.25};
  Rng rng(4);
  const auto sel = select_without_replacement(w, 2, rng);
  EXPECT_EQ(sel.deterministic, std::vector<std::size_t>{0});
}

TEST(Downsample, SingleCandidateIsKept) {
  Rng rng(0);
  const auto out = downsample_without_replacement(weighted({0.7}), 1, rng);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out[0].log_weight, std::log(0.7), 1e-15);
}

TEST(Downsample, WeightUpdates) {
  // N' = 3, N = 2; c* = 2 on the normalized weights [0.5, 0.3, 0.2].
  const std::vector<double> raw{1.0, 0.6, 0.4};
  Rng rng(5);
  const auto out = downsample_without_replacement(weighted(raw), 2, rng);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_NEAR(std::exp(out[0].log_weight), 1.0 * 2 / 3, 1e-12);
  EXPECT_NEAR(std::exp(out[1].log_weight), 2.0 / (2.0 * 3) * 2.0, 1e-12);
}

TEST(Downsample, KeepAllShrinksThePopulation) {
  Rng rng(6);
  const auto out = downsample_without_replacement(weighted({0.3, 0.0, 0.9, 0.0}), 3, rng);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_NEAR(std::exp(out[0].log_weight), 0.3 * 3 / 4, 1e-12);
  EXPECT_NEAR(std::exp(out[1].log_weight), 0.9 * 3 / 4, 1e-12);
}

TEST(Downsample, MeanWeightIsUnbiased) {
  const std::vector<double> raw{0.05, 2.0, 0.3, 0.3, 0.01, 1.2, 0.7};
  const double target = std::accumulate(raw.begin(), raw.end(), 0.0) / raw.size();
  const std::size_t n = 3;
  const int runs = 50000;
  Rng rng(7);
  std::vector<double> totals;
  for (int r = 0; r < runs; ++r) {
    const auto out = downsample_without_replacement(weighted(raw), n, rng);
    double s = 0;
    for (const auto& p : out) s += std::exp(p.log_weight);
    totals.push_back(s / n);
  }
  const auto ms = oracle::mean_se(totals);
  EXPECT_NEAR(ms.mean, target, 3 * ms.se + 1e-9);
}

TEST(Downsample, StoppedParticleWeightSurvivesAStep) {
  // A stopped particle enters with w N'/N and, kept deterministically, leaves with w.
  const std::size_t n = 2, np = 4;
  auto cands = weighted({0.01, 0.01, 0.01, 1.0});
  const double w = 1.0;
  cands[3].log_weight = std::log(w) + std::log(double(np) / n);
  Rng rng(8);
  const auto out = downsample_without_replacement(std::move(cands), n, rng);
  const auto it = std::find_if(out.begin(), out.end(), [](const Particle& p) { return p.state.seq.size() == 3; });
  ASSERT_NE(it, out.end());
  EXPECT_NEAR(it->log_weight, std::log(w), 1e-12);
}

TEST(SmcRun, TerminalInitialState) {
  const FixedModel model(-1, 0.0, true);
  SmcConfig cfg;
  cfg.n_particles = 5;
  const auto r = smc_run(model, cfg, *toy::uniform_abe());
  ASSERT_EQ(r.particles.size(), 5u);
  for (const auto& p : r.particles) EXPECT_EQ(p.log_weight, 0.0);
  EXPECT_EQ(r.log_zhat, 0.0);
  EXPECT_EQ(r.steps_taken, 0);
}

TEST(SmcRun, UnitPotentialGivesZOne) {
  const auto v = toy::abe_vocab();
  const auto model = zoo::hard_constraint_plain(empty_abe(), zoo::PrefixConstraint::none(v));
  for (std::size_t n : {1u, 3u, 8u}) {
    SmcConfig cfg;
    cfg.n_particles = n;
    cfg.seed = 9;
    const auto r = smc_run(*model, cfg, *toy::uniform_abe());
    EXPECT_NEAR(r.log_zhat, 0.0, 1e-12) << n;
    for (const auto& p : r.particles) EXPECT_TRUE(p.state.terminated());
  }
}

TEST(SmcRun, ConstantPotentialMultipliesOut) {
  // Three steps with G = 1/2 each give Z = 1/8 exactly, whatever N and K are.
  const FixedModel model(3, std::log(0.5));
  SmcConfig cfg;
  cfg.n_particles = 3;
  cfg.expansion_factor = 2;
  const auto r = smc_run(model, cfg, *toy::uniform_abe());
  EXPECT_NEAR(r.log_zhat, std::log(0.125), 1e-12);
  EXPECT_EQ(r.steps_taken, 3);
}

TEST(SmcRun, SingleParticleIsIndicatorImportanceSampling) {
  const auto model = no_b_plain();
  SmcConfig cfg;
  cfg.n_particles = 1;
  cfg.expansion_factor = 1;
  const auto results = oracle::run_seeds(*model, *toy::uniform_abe(), cfg, 4000);
  std::vector<double> z;
  for (const auto& r : results) {
    const double zi = std::exp(r.log_zhat);
    ASSERT_TRUE(zi == 0.0 || std::abs(zi - 1.0) < 1e-12) << zi;
    z.push_back(zi);
  }
  const auto ms = oracle::mean_se(z);
  EXPECT_NEAR(ms.mean, 0.5, 3 * ms.se);
}

TEST(SmcRun, NoBEstimateIsUnbiased) {
  const auto model = no_b_plain();
  SmcConfig cfg;
  cfg.n_particles = 4;
  cfg.expansion_factor = 3;
  const auto rep = oracle::unbiasedness_test(*model, *toy::uniform_abe(), cfg, 10000, 0.5, 0.75, oracle::seq_length);
  EXPECT_TRUE(rep.pass_z) << rep.mean_zhat << " +- " << rep.se;
  EXPECT_TRUE(rep.pass_f) << rep.mean_zf << " +- " << rep.se_zf;
}

TEST(SmcRun, UncorrectedWeightsAreBiased) {
  const auto model = no_b_plain();
  SmcConfig cfg;
  cfg.uncorrected_stratified_weights = true;
  const auto rep = oracle::unbiasedness_test(*model, *toy::uniform_abe(), cfg, 10000, 0.5, 0.75, oracle::seq_length);
  EXPECT_FALSE(rep.pass_z) << rep.mean_zhat << " +- " << rep.se;
}

TEST(SmcRun, PosteriorUnreachable) {
  const FixedModel model(5, kNegInf);
  SmcConfig cfg;
  try {
    smc_run(model, cfg, *toy::uniform_abe());
    FAIL() << "expected PosteriorUnreachable";
  } catch (const PosteriorUnreachable& e) {
    EXPECT_EQ(e.partial().log_zhat, kNegInf);
    EXPECT_EQ(e.partial().steps_taken, 1);
  }
}

TEST(SmcRun, StepCapExceeded) {
  const FixedModel model(-1, 0.0);
  SmcConfig cfg;
  cfg.max_steps = 7;
  try {
    smc_run(model, cfg, *toy::uniform_abe());
    FAIL() << "expected StepCapExceeded";
  } catch (const StepCapExceeded& e) {
    EXPECT_EQ(e.partial().steps_taken, 7);
    EXPECT_EQ(e.partial().particles.size(), cfg.n_particles);
    EXPECT_NEAR(e.partial().log_zhat, 0.0, 1e-12);
  }
}

TEST(SmcRun, InvalidConfig) {
  const auto model = no_b_plain();
  SmcConfig cfg;
  cfg.n_particles = 0;
  EXPECT_THROW(smc_run(*model, cfg, *toy::uniform_abe()), std::invalid_argument);
  cfg = SmcConfig{};
  cfg.expansion_factor = 0;
  EXPECT_THROW(smc_run(*model, cfg, *toy::uniform_abe()), std::invalid_argument);
}

TEST(SmcRun, DeterministicAcrossThreadCounts) {
  for (const auto& inst : toy::zoo_instances()) {
    SmcConfig cfg;
    cfg.n_particles = 6;
    cfg.seed = 42;
    auto run = [&](std::size_t threads) -> SmcResult {
      cfg.threads = threads;
      try {
        return smc_run(*inst.model, cfg, *inst.backend);
      } catch (const PosteriorUnreachable& e) {
        return e.partial();
      }
    };
    const auto a = run(1);
    const auto b = run(4);
    const auto c = run(1);
    EXPECT_EQ(a.log_zhat, b.log_zhat) << inst.name;
    EXPECT_EQ(a.log_zhat, c.log_zhat) << inst.name;
    ASSERT_EQ(a.particles.size(), b.particles.size()) << inst.name;
    for (std::size_t i = 0; i < a.particles.size(); ++i) {
      EXPECT_EQ(a.particles[i].state.seq, b.particles[i].state.seq) << inst.name;
      EXPECT_EQ(a.particles[i].log_weight, b.particles[i].log_weight) << inst.name;
    }
    EXPECT_EQ(a.cache_stats.backend_evals, b.cache_stats.backend_evals) << inst.name;
  }
}

TEST(SmcRun, CacheDoesNotChangeResults) {
  const auto model = no_b_plain();
  SmcConfig cfg;
  cfg.seed = 5;
  const auto on = smc_run(*model, cfg, *toy::uniform_abe());
  cfg.cache_mode = CacheMode::kDisabled;
  const auto off = smc_run(*model, cfg, *toy::uniform_abe());
  EXPECT_EQ(on.log_zhat, off.log_zhat);
  ASSERT_EQ(on.particles.size(), off.particles.size());
  for (std::size_t i = 0; i < on.particles.size(); ++i) EXPECT_EQ(on.particles[i].state.seq, off.particles[i].state.seq);
  EXPECT_GT(on.cache_stats.hits, 0u);
}
