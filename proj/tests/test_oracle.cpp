#include <gtest/gtest.h>

#include "smcsteer/cache.hpp"
#include "smcsteer/oracle.hpp"
#include "smcsteer/ppl.hpp"
#include "smcsteer/toy.hpp"
#include "smcsteer/zoo.hpp"

using namespace smcsteer;

namespace {

const Vocab& abe() {
  static const Vocab v = toy::abe_vocab();
  return v;
}

Seq done(const std::string& s) { return Seq::from_text(abe(), s).appended(abe().eos()); }

zoo::ModelPtr no_b() {
  return zoo::hard_constraint_plain(Seq::empty(abe()), zoo::PrefixConstraint::forbid_tokens(abe(), {abe().id("b")}));
}

zoo::ModelPtr unconstrained() { return zoo::hard_constraint_plain(Seq::empty(abe()), zoo::PrefixConstraint::none(abe())); }

// Samples a token and then rejects it.
class RejectAll final : public ppl::Program {
 public:
  std::string name() const override { return "reject-all"; }
  State initial_state() const override { return State{Seq::empty(abe()), {}}; }
  void step(ppl::Runtime& self) const override {
    const auto w = self.sample(self.transformer(self.s()));
    self.s() = self.s().appended(static_cast<TokenId>(w));
    self.condition(false);
  }
};

oracle::EnumerationLimits cap(std::size_t len) {
  oracle::EnumerationLimits lim;
  lim.length_cap = len;
  return lim;
}

}  // namespace

TEST(Enumerate, NoBPosterior) {
  const auto backend = toy::uniform_abe();
  TrieCache cache(*backend);
  const auto post = oracle::enumerate_posterior(*no_b(), cache, cap(20));
  EXPECT_NEAR(post.z(), 0.5, 1e-6);
  EXPECT_NEAR(post.prob(done("")), 2.0 / 3, 1e-6);
  EXPECT_NEAR(post.prob(done("a")), 2.0 / 9, 1e-6);
  EXPECT_EQ(post.prob(done("b")), 0.0);
  EXPECT_GT(post.tail_mass_bound, 0.0);
  EXPECT_GE(post.z() + post.tail_mass_bound, 0.5 - 1e-12);
  for (const auto& [s, m] : post.mass) EXPECT_NEAR(m, std::pow(3.0, -static_cast<double>(s.size())), 1e-15);
}

TEST(Enumerate, UnitPotentialGivesTheAncestralLaw) {
  const auto backend = toy::uniform_abe();
  TrieCache cache(*backend);
  const auto post = oracle::enumerate_posterior(*unconstrained(), cache, cap(6));
  // Every string of up to five content tokens, at its kernel probability.
  std::size_t expected = 0;
  for (int k = 0; k <= 5; ++k) expected += std::size_t{1} << k;
  EXPECT_EQ(post.mass.size(), expected);
  for (const auto& [s, m] : post.mass) EXPECT_NEAR(m, std::pow(3.0, -static_cast<double>(s.size())), 1e-15);
  EXPECT_NEAR(post.z() + post.tail_mass_bound, 1.0, 1e-12);
}

TEST(Enumerate, CompleteEnumerationHasNoTail) {
  const auto it = toy::intersect_toy();
  TrieCache cache(*it.backend);
  const auto post = oracle::enumerate_posterior(*zoo::intersect(it.prompts, false), cache, cap(16));
  EXPECT_EQ(post.tail_mass_bound, 0.0);
  double total = 0.0;
  for (const auto& [s, p] : post.normalized()) total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Enumerate, EverythingRejectedIsANullPosterior) {
  const auto backend = toy::uniform_abe();
  TrieCache cache(*backend);
  const auto model = ppl::compile_program(std::make_shared<RejectAll>());
  const auto post = oracle::enumerate_posterior(*model, cache, cap(6));
  EXPECT_TRUE(post.null_posterior());
  EXPECT_EQ(post.log_z, kNegInf);
  EXPECT_TRUE(post.normalized().empty());
}

TEST(Enumerate, Integrate) {
  const auto backend = toy::uniform_abe();
  TrieCache cache(*backend);
  const auto post = oracle::enumerate_posterior(*no_b(), cache, cap(24));
  EXPECT_NEAR(post.integrate(oracle::seq_length), 0.75, 1e-9);
  EXPECT_NEAR(post.integrate([](const Seq&) { return 1.0; }), post.z(), 1e-15);
}

TEST(Enumerate, ProgramsAgreeWithHandWrittenModels) {
  for (const auto& inst : toy::zoo_instances()) {
    if (inst.name.starts_with("infill")) continue;
    const auto prog = ppl::compile_program(inst.program, inst.model->tail_factor());
    TrieCache ca(*inst.backend), cb(*inst.backend);
    const auto lim = cap(std::min<std::size_t>(inst.limits.length_cap, 10));
    const auto a = oracle::enumerate_posterior(*inst.model, ca, lim);
    const auto b = oracle::enumerate_posterior(*prog, cb, lim);
    EXPECT_NEAR(a.z(), b.z(), 1e-12) << inst.name;
    EXPECT_LT(oracle::tv_distance(a.normalized(), b.normalized()), 1e-12) << inst.name;
  }
}

TEST(Distance, TotalVariation) {
  const Seq x = done("a"), y = done("b");
  const oracle::Dist p{{x, 0.75}, {y, 0.25}};
  const oracle::Dist q{{x, 0.5}, {y, 0.5}};
  EXPECT_NEAR(oracle::tv_distance(p, p), 0.0, 1e-15);
  EXPECT_NEAR(oracle::tv_distance(p, q), 0.25, 1e-15);
  EXPECT_NEAR(oracle::tv_distance(oracle::Dist{{x, 1.0}}, oracle::Dist{{y, 1.0}}), 1.0, 1e-15);
  // Both sides are normalized first.
  EXPECT_NEAR(oracle::tv_distance(oracle::Dist{{x, 3.0}, {y, 1.0}}, q), 0.25, 1e-15);
}

TEST(Distance, KullbackLeibler) {
  const Seq x = done("a"), y = done("b");
  const oracle::Dist p{{x, 0.75}, {y, 0.25}};
  const oracle::Dist q{{x, 0.5}, {y, 0.5}};
  EXPECT_NEAR(oracle::kl_divergence(p, p), 0.0, 1e-15);
  EXPECT_NEAR(oracle::kl_divergence(p, q), 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-12);
  EXPECT_EQ(oracle::kl_divergence(p, oracle::Dist{{x, 1.0}}), std::numeric_limits<double>::infinity());
  // Extra support in q costs nothing in this direction.
  EXPECT_NEAR(oracle::kl_divergence(oracle::Dist{{x, 1.0}}, q), std::log(2.0), 1e-12);
}

TEST(Stats, MeanSe) {
  const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
  const auto m = oracle::mean_se(xs);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_NEAR(m.se, std::sqrt(5.0 / 3.0 / 4.0), 1e-15);
  const std::vector<double> one{7.0};
  EXPECT_EQ(oracle::mean_se(one).se, 0.0);
  EXPECT_EQ(oracle::mean_se(std::vector<double>{}).mean, 0.0);
  const std::vector<double> dead{0.0, kNegInf};
  EXPECT_EQ(oracle::mean_se(dead).mean, kNegInf);
}

TEST(Stats, EmpiricalPoolNormalizesEachRun) {
  oracle::EmpiricalPool pool;
  const std::vector<Particle> r1{{State{done("a"), {}}, std::log(3.0)}, {State{done("b"), {}}, std::log(1.0)}};
  const std::vector<Particle> r2{{State{done("b"), {}}, std::log(10.0)}, {State{done(""), {}}, kNegInf}};
  pool.add_run(r1);
  pool.add_run(r2);
  EXPECT_EQ(pool.runs(), 2u);
  const auto d = pool.distribution();
  EXPECT_NEAR(d.at(done("a")), 0.375, 1e-15);
  EXPECT_NEAR(d.at(done("b")), 0.625, 1e-15);
  EXPECT_FALSE(d.contains(done("")) && d.at(done("")) > 0.0);
}

TEST(RunSeeds, OrderedBySeed) {
  const auto model = no_b();
  const auto backend = toy::uniform_abe();
  SmcConfig cfg;
  cfg.seed = 10;
  const auto many = oracle::run_seeds(*model, *backend, cfg, 5, 3);
  ASSERT_EQ(many.size(), 5u);
  for (std::size_t r = 0; r < many.size(); ++r) {
    SmcConfig c = cfg;
    c.seed = cfg.seed + r;
    const auto one = smc_run(*model, c, *backend);
    EXPECT_EQ(one.log_zhat, many[r].log_zhat) << r;
    ASSERT_EQ(one.particles.size(), many[r].particles.size());
    for (std::size_t i = 0; i < one.particles.size(); ++i)
      EXPECT_EQ(one.particles[i].state.seq, many[r].particles[i].state.seq);
  }
}

TEST(RunSeeds, UnreachableRunsReturnPartials) {
  const auto model = ppl::compile_program(std::make_shared<RejectAll>());
  const auto backend = toy::uniform_abe();
  const auto rs = oracle::run_seeds(*model, *backend, SmcConfig{}, 3);
  ASSERT_EQ(rs.size(), 3u);
  for (const auto& r : rs) EXPECT_EQ(r.log_zhat, kNegInf);
}

TEST(Unbiasedness, UnitPotentialIsExact) {
  SmcConfig cfg;
  cfg.n_particles = 3;
  const auto rep =
      oracle::unbiasedness_test(*unconstrained(), *toy::uniform_abe(), cfg, 200, 1.0, 3.0, oracle::seq_length);
  EXPECT_NEAR(rep.mean_zhat, 1.0, 1e-12);
  EXPECT_NEAR(rep.se, 0.0, 1e-12);
  EXPECT_TRUE(rep.pass_z);
  EXPECT_TRUE(rep.pass_f) << rep.mean_zf << " +- " << rep.se_zf;
  EXPECT_TRUE(rep.pass);
}

TEST(Unbiasedness, WrongTargetFails) {
  SmcConfig cfg;
  cfg.seed = 2;
  const auto rep = oracle::unbiasedness_test(*no_b(), *toy::uniform_abe(), cfg, 2000, 0.6, 0.75, oracle::seq_length);
  EXPECT_FALSE(rep.pass_z) << rep.mean_zhat << " +- " << rep.se;
  EXPECT_FALSE(rep.pass);
  EXPECT_EQ(rep.runs, 2000u);
  EXPECT_EQ(rep.exact_z, 0.6);
}
