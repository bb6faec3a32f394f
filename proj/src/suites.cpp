#include "smcsteer/suites.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <sstream>

#include "smcsteer/app.hpp"
#include "smcsteer/cache.hpp"
#include "smcsteer/oracle.hpp"
#include "smcsteer/toy.hpp"

namespace smcsteer::suites {

using app::fmt;

bool SuiteResult::pass() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

oracle::ExactPosterior enumerate(const FkModel& model, const LogitsBackend& backend, const oracle::EnumerationLimits& lim) {
  TrieCache cache(backend);
  return oracle::enumerate_posterior(model, cache, lim);
}

oracle::EnumerationLimits cap(std::size_t length_cap) {
  oracle::EnumerationLimits lim;
  lim.length_cap = length_cap;
  return lim;
}

// Largest absolute difference between two measures over the union of supports.
double max_abs_diff(const oracle::Dist& a, const oracle::Dist& b) {
  double worst = 0.0;
  for (const auto& [s, v] : a) {
    auto it = b.find(s);
    worst = std::max(worst, std::abs(v - (it == b.end() ? 0.0 : it->second)));
  }
  for (const auto& [s, v] : b)
    if (!a.count(s)) worst = std::max(worst, std::abs(v));
  return worst;
}

// ---------------------------------------------------------------------------
// 1

SuiteResult exact_recovery(const SuiteOptions& opts) {
  SuiteResult res{1, "exact-recovery", "exact posterior recovery", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();
  const Vocab v = toy::abe_vocab();
  const auto backend = toy::uniform_abe();
  const auto model = zoo::hard_constraint_plain(Seq(v.eos()), zoo::PrefixConstraint::forbid_tokens(v, {v.id("b")}));

  const auto post = enumerate(*model, *backend, cap(24));
  const Seq eos_only(v.eos(), {v.eos()});
  res.checks.push_back({"enumerated Z = 1/2", std::abs(post.z() - 0.5) < 1e-6, "Z = " + fmt(post.z(), 12)});
  res.checks.push_back(
      {"enumerated P(EOS) = 2/3", std::abs(post.prob(eos_only) - 2.0 / 3.0) < 1e-6, "P(EOS) = " + fmt(post.prob(eos_only), 12)});

  SmcConfig cfg;
  cfg.n_particles = 64;
  cfg.expansion_factor = 3;
  cfg.seed = 1;
  oracle::EmpiricalPool pool;
  for (const auto& r : oracle::run_seeds(*model, *backend, cfg, 1000, opts.threads)) pool.add_run(r.particles);
  const double tv = oracle::tv_distance(post, pool.distribution());
  const double secs = seconds_since(start);
  res.checks.push_back({"TV(pooled SMC, exact) < 0.05 over 1000 runs, N=64, K=3", tv < 0.05, "TV = " + fmt(tv)});
  res.checks.push_back({"runtime < 30 s", secs < 30.0, fmt(secs, 3) + " s"});
  res.seconds = secs;
  return res;
}

// ---------------------------------------------------------------------------
// 2

SuiteResult unbiasedness(const SuiteOptions& opts) {
  SuiteResult res{2, "unbiasedness", "unbiasedness of Z-hat", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();
  SmcConfig cfg;
  cfg.n_particles = 4;
  cfg.expansion_factor = 3;
  cfg.seed = 1;
  constexpr std::size_t kRuns = 10000;
  const auto instances = toy::zoo_instances();
  for (const auto& in : instances) {
    const auto rep =
        oracle::unbiasedness_test(*in.model, *in.backend, cfg, kRuns, in.exact_z, in.exact_z_length, oracle::seq_length, opts.threads);
    std::ostringstream d;
    d << "mean Z-hat " << fmt(rep.mean_zhat) << " +- " << fmt(rep.se) << " vs " << fmt(rep.exact_z) << "; mean Z-hat*len "
      << fmt(rep.mean_zf) << " +- " << fmt(rep.se_zf) << " vs " << fmt(rep.exact_zf);
    res.checks.push_back({in.name + ": |mean - Z| <= 3 SE (Z and length integral)", rep.pass, d.str()});
  }

  // Negative control: stratified survivors keep their own rescaled weights.
  SmcConfig bad = cfg;
  bad.uncorrected_stratified_weights = true;
  const auto& in = instances.front();
  const auto rep =
      oracle::unbiasedness_test(*in.model, *in.backend, bad, kRuns, in.exact_z, in.exact_z_length, oracle::seq_length, opts.threads);
  res.checks.push_back({"negative control (uncorrected stratified weights) fails on " + in.name, !rep.pass,
                        "mean Z-hat " + fmt(rep.mean_zhat) + " +- " + fmt(rep.se) + " vs " + fmt(rep.exact_z)});

  const double secs = seconds_since(start);
  res.checks.push_back({"runtime < 5 min", secs < 300.0, fmt(secs, 3) + " s"});
  res.seconds = secs;
  return res;
}

// ---------------------------------------------------------------------------
// 3

SuiteResult jensen(const SuiteOptions& opts) {
  SuiteResult res{3, "jensen", "Jensen bound and consistency trend", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();
  constexpr std::size_t kRuns = 1000;
  const std::vector<std::size_t> ns{1, 2, 4, 8, 16, 32};
  const Seq tail_bucket(0, {-1});

  for (const auto& in : toy::zoo_instances()) {
    const double log_z = std::log(in.exact_z);
    // Exact posterior with the unenumerated remainder lumped into one bucket.
    const auto post = enumerate(*in.model, *in.backend, in.limits);
    oracle::Dist p;
    double covered = 0.0;
    for (const auto& [s, m] : post.mass) {
      p[s] = m / in.exact_z;
      covered += m / in.exact_z;
    }
    p[tail_bucket] = std::max(0.0, 1.0 - covered);

    std::map<std::size_t, oracle::MeanSe> by_n;
    bool bound_ok = true, kl_ok = true;
    std::ostringstream d;
    for (std::size_t n : ns) {
      SmcConfig cfg;
      cfg.n_particles = n;
      cfg.expansion_factor = 3;
      cfg.seed = 1000 * n;
      const auto results = oracle::run_seeds(*in.model, *in.backend, cfg, kRuns, opts.threads);
      std::vector<double> logs;
      oracle::EmpiricalPool pool;
      for (const auto& r : results) {
        logs.push_back(r.log_zhat);
        pool.add_run(r.particles);
      }
      const auto ms = oracle::mean_se(logs);
      by_n[n] = ms;
      bound_ok = bound_ok && ms.mean <= log_z + 3.0 * ms.se;

      oracle::Dist q;
      for (const auto& [s, w] : pool.distribution()) q[post.mass.count(s) ? s : tail_bucket] += w;
      const double kl = oracle::kl_divergence(q, p);
      const double gap = log_z - ms.mean;
      kl_ok = kl_ok && kl <= gap + 3.0 * ms.se;
      d << "N=" << n << ": mean log Z-hat " << fmt(ms.mean) << " +- " << fmt(ms.se) << ", KL " << fmt(kl) << "; ";
    }
    d << "log Z " << fmt(log_z);
    res.checks.push_back({in.name + ": mean log Z-hat <= log Z (3 SE) at every N", bound_ok, d.str()});
    res.checks.push_back({in.name + ": KL(q || P) <= log Z - mean log Z-hat (3 SE) at every N", kl_ok, ""});
    if (in.constraint_binds) {
      const auto lo = by_n[1], hi = by_n[32];
      // A -inf mean at N=1 (some run found no surviving particle) is exceeded by any finite mean.
      const bool trend = std::isinf(lo.mean) ? std::isfinite(hi.mean)
                                             : hi.mean - lo.mean > 2.0 * std::sqrt(lo.se * lo.se + hi.se * hi.se);
      res.checks.push_back({in.name + ": mean log Z-hat at N=32 exceeds N=1 by > 2 SE", trend,
                            fmt(hi.mean) + " vs " + fmt(lo.mean)});
    }
  }
  res.seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// 4

SuiteResult equivalence(const SuiteOptions&) {
  SuiteResult res{4, "equivalence", "formulation equivalence", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();

  auto compare = [&](const std::string& name, const FkModel& a, const FkModel& b, const LogitsBackend& backend,
                     std::size_t length_cap) {
    const auto pa = enumerate(a, backend, cap(length_cap));
    const auto pb = enumerate(b, backend, cap(length_cap));
    const double diff = max_abs_diff(pa.normalized(), pb.normalized());
    const bool ok = !pa.null_posterior() && !pb.null_posterior() && diff <= 1e-9;
    res.checks.push_back({name, ok, "max |P_a - P_b| = " + fmt(diff, 3) + " over " + std::to_string(pa.mass.size()) + " strings"});
  };

  const Vocab abe = toy::abe_vocab();
  const TokenId a = abe.id("a"), b = abe.id("b");
  const Seq empty(abe.eos());
  const auto uniform = toy::uniform_abe();
  const auto skewed = std::make_shared<TableBackend>(TableBackend::from_probabilities(abe, {}, std::vector<double>{0.5, 0.3, 0.2}));

  auto hc_pair = [&](const std::string& name, const zoo::PrefixConstraint& c, const LogitsBackend& backend, std::size_t length_cap) {
    const Seq prompt(backend.vocab().eos());
    compare("plain vs masked: " + name, *zoo::hard_constraint_plain(prompt, c), *zoo::hard_constraint_masked(prompt, c), backend,
            length_cap);
  };
  hc_pair("no b, uniform {a,b}", zoo::PrefixConstraint::forbid_tokens(abe, {b}), *uniform, 8);
  hc_pair("runs of a at most 2, skewed {a,b}", zoo::PrefixConstraint::max_word_length(abe, 2, "b"), *skewed, 8);
  zoo::Dfa abab{0, {{{a, 1}}, {{b, 0}}}, {0}};
  hc_pair("prefixes of (ab)*, skewed {a,b}", zoo::PrefixConstraint::regular(abe, abab), *skewed, 8);

  const Vocab abce = Vocab::from_characters("abc");
  const auto uniform4 = std::make_shared<UniformBackend>(abce);
  hc_pair("no c, uniform {a,b,c}", zoo::PrefixConstraint::forbid_tokens(abce, {abce.id("c")}), *uniform4, 6);
  hc_pair("runs of non-c at most 2, uniform {a,b,c}", zoo::PrefixConstraint::max_word_length(abce, 2, "c"), *uniform4, 6);

  const auto it = toy::intersect_toy();
  compare("single-proposal vs locally-optimal: toy prompts a, b", *zoo::intersect(it.prompts, false),
          *zoo::intersect(it.prompts, true), *it.backend, 8);
  compare("single-proposal vs locally-optimal: identical prompts", *zoo::intersect({it.prompts[0], it.prompts[0]}, false),
          *zoo::intersect({it.prompts[0], it.prompts[0]}, true), *it.backend, 8);
  compare("single-proposal vs locally-optimal: three prompts", *zoo::intersect({it.prompts[0], it.prompts[1], it.prompts[0]}, false),
          *zoo::intersect({it.prompts[0], it.prompts[1], it.prompts[0]}, true), *it.backend, 8);
  compare("single-proposal vs locally-optimal: uniform, two empty prompts", *zoo::intersect({empty, empty}, false),
          *zoo::intersect({empty, empty}, true), *uniform, 6);

  res.seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// 5

SuiteResult compare(const SuiteOptions& opts) {
  SuiteResult res{5, "compare", "proposal-quality ordering", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();
  app::CompareOptions co;
  co.runs = 100;
  co.seed = 1;
  co.threads = opts.threads;

  const auto it = toy::intersect_toy();
  const auto rows = app::compare_models(*zoo::intersect(it.prompts, false), *zoo::intersect(it.prompts, true), *it.backend, co);
  bool never_worse = true;
  std::size_t strict = 0;
  std::ostringstream d;
  for (const auto& r : rows) {
    const double se = std::sqrt(r.se_a * r.se_a + r.se_b * r.se_b);
    never_worse = never_worse && r.mean_b >= r.mean_a - 2.0 * se;
    if (r.mean_b - r.mean_a > 2.0 * se) ++strict;
    d << "N=" << r.n << ": single " << fmt(r.mean_a, 4) << " +- " << fmt(r.se_a, 2) << ", optimal " << fmt(r.mean_b, 4)
      << " +- " << fmt(r.se_b, 2) << "; ";
  }
  res.checks.push_back({"intersect: locally-optimal >= single-proposal (2 SE) at every N", never_worse, d.str()});
  res.checks.push_back({"intersect: locally-optimal better by > 2 SE for at least half the N", 2 * strict >= rows.size(),
                        std::to_string(strict) + " of " + std::to_string(rows.size())});

  const Vocab v = toy::abe_vocab();
  const auto c = zoo::PrefixConstraint::forbid_tokens(v, {v.id("b")});
  const auto hc = app::compare_models(*zoo::hard_constraint_plain(Seq(v.eos()), c), *zoo::hard_constraint_masked(Seq(v.eos()), c),
                                      *toy::uniform_abe(), co);
  bool masked_ok = true;
  std::ostringstream dh;
  for (const auto& r : hc) {
    const double se = std::sqrt(r.se_a * r.se_a + r.se_b * r.se_b);
    masked_ok = masked_ok && (std::isinf(r.mean_a) || r.mean_b >= r.mean_a - 2.0 * se);
    dh << "N=" << r.n << ": plain " << fmt(r.mean_a, 4) << ", masked " << fmt(r.mean_b, 4) << "; ";
  }
  res.checks.push_back({"hard constraint: masked >= plain (2 SE) at every N", masked_ok, dh.str()});

  const auto self = app::compare_models(*zoo::intersect(it.prompts, true), *zoo::intersect(it.prompts, true), *it.backend, co);
  const bool self_tie = std::all_of(self.begin(), self.end(), [](const app::CompareRow& r) { return r.better == "tie"; });
  res.checks.push_back({"self-comparison is a tie at every N", self_tie, ""});
  res.seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// 6

SuiteResult resampler(const SuiteOptions&) {
  SuiteResult res{6, "resampler", "without-replacement resampler", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();
  const std::vector<double> w{0.5, 0.3, 0.2};
  constexpr std::size_t kN = 2;
  constexpr std::size_t kTrials = 100000;
  const auto cstar = find_cstar(w, kN);
  res.checks.push_back({"c* = 2", cstar && std::abs(*cstar - 2.0) < 1e-12, cstar ? fmt(*cstar, 12) : "none"});

  std::vector<std::size_t> hits(w.size(), 0);
  bool distinct = true, sized = true;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    Rng rng = Rng::substream(42, trial, kResampleTag, 0);
    const auto sel = select_without_replacement(w, kN, rng);
    std::vector<std::size_t> all = sel.deterministic;
    all.insert(all.end(), sel.stratified.begin(), sel.stratified.end());
    sized = sized && all.size() == kN;
    std::sort(all.begin(), all.end());
    distinct = distinct && std::adjacent_find(all.begin(), all.end()) == all.end();
    for (auto i : all) ++hits[i];
  }
  const std::vector<double> expected{1.0, 0.6, 0.4};
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double f = static_cast<double>(hits[i]) / kTrials;
    const double se = std::sqrt(expected[i] * (1.0 - expected[i]) / kTrials);
    res.checks.push_back({"inclusion frequency of candidate " + std::to_string(i) + " = " + fmt(expected[i]),
                          std::abs(f - expected[i]) <= 3.0 * se, fmt(f) + " (3 SE = " + fmt(3.0 * se, 3) + ")"});
  }
  res.checks.push_back({"selected indices always distinct", distinct, ""});
  res.checks.push_back({"|I_det| + |I_strat| = N in every trial", sized, ""});
  res.seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// 7

bool same_particles(const SmcResult& a, const SmcResult& b) {
  if (a.particles.size() != b.particles.size() || a.steps_taken != b.steps_taken) return false;
  // Bitwise comparison, with -inf == -inf.
  auto same = [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; };
  if (!same(a.log_zhat, b.log_zhat)) return false;
  for (std::size_t i = 0; i < a.particles.size(); ++i)
    if (a.particles[i].state.seq != b.particles[i].state.seq || !same(a.particles[i].log_weight, b.particles[i].log_weight))
      return false;
  return true;
}

SmcResult run_allowing_unreachable(const FkModel& model, const SmcConfig& cfg, const LogitsBackend& backend) {
  try {
    return smc_run(model, cfg, backend);
  } catch (const PosteriorUnreachable& e) {
    return e.partial();
  }
}

SuiteResult cache_efficiency(const SuiteOptions&) {
  SuiteResult res{7, "cache", "cache efficiency", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();

  bool evals_match = true, identical = true;
  std::ostringstream d;
  for (const auto& in : toy::zoo_instances()) {
    for (std::uint64_t seed : {1, 2, 3}) {
      SmcConfig cfg;
      cfg.n_particles = 16;
      cfg.expansion_factor = 3;
      cfg.seed = seed;
      toy::CountingBackend cached(in.backend), uncached(in.backend);
      const auto r1 = run_allowing_unreachable(*in.model, cfg, cached);
      cfg.cache_mode = CacheMode::kDisabled;
      const auto r2 = run_allowing_unreachable(*in.model, cfg, uncached);
      evals_match = evals_match && cached.evaluations() == cached.distinct_contexts() &&
                    r1.cache_stats.backend_evals == cached.evaluations();
      identical = identical && same_particles(r1, r2);
      if (seed == 1) d << in.name << ": " << cached.evaluations() << " cached vs " << uncached.evaluations() << " uncached; ";
    }
  }
  res.checks.push_back({"backend evaluations = distinct contexts queried (every instance, 3 seeds)", evals_match, d.str()});
  res.checks.push_back({"cached and uncached runs are bit-identical", identical, ""});

  const Vocab v = toy::abe_vocab();
  const auto model = zoo::hard_constraint_plain(Seq(v.eos()), zoo::PrefixConstraint::forbid_tokens(v, {v.id("b")}));
  SmcConfig cfg;
  cfg.n_particles = 16;
  cfg.expansion_factor = 3;
  cfg.seed = 7;
  toy::CountingBackend cached(toy::uniform_abe()), uncached(toy::uniform_abe());
  run_allowing_unreachable(*model, cfg, cached);
  cfg.cache_mode = CacheMode::kDisabled;
  run_allowing_unreachable(*model, cfg, uncached);
  res.checks.push_back({"uncached run does >= 2x the evaluations (no b, N=16, K=3)",
                        uncached.evaluations() >= 2 * cached.evaluations(),
                        std::to_string(uncached.evaluations()) + " vs " + std::to_string(cached.evaluations())});
  res.seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// 8

SuiteResult ppl_semantics(const SuiteOptions&) {
  SuiteResult res{8, "ppl", "PPL semantics", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();

  auto compare = [&](const std::string& name, const FkModel& hand, std::shared_ptr<const ppl::Program> prog,
                     const LogitsBackend& backend, const oracle::EnumerationLimits& lim) {
    const auto compiled = ppl::compile_program(std::move(prog), hand.tail_factor());
    const auto ph = enumerate(hand, backend, lim);
    const auto pp = enumerate(*compiled, backend, lim);
    const double diff = max_abs_diff(ph.mass, pp.mass);
    const double dz = std::abs(ph.z() - pp.z());
    res.checks.push_back({"program = hand-written: " + name, diff <= 1e-9 && dz <= 1e-9 && ph.mass.size() == pp.mass.size(),
                          "max mass diff " + fmt(diff, 3) + ", |dZ| " + fmt(dz, 3)});
  };

  for (const auto& in : toy::zoo_instances()) {
    auto lim = in.limits;
    lim.length_cap = std::min<std::size_t>(lim.length_cap, 12);
    compare(in.name, *in.model, in.program, *in.backend, lim);
  }
  const Vocab v = toy::abe_vocab();
  const Seq empty(v.eos());
  const auto uniform = toy::uniform_abe();
  zoo::InfillTemplate tmpl{{empty, Seq(v.eos(), {v.id("b"), v.eos()})}, 0.5};
  oracle::EnumerationLimits lim;
  lim.length_cap = 64;
  lim.step.support_cap = 8;
  compare("infill, uniform backend", *zoo::infill(tmpl, true), zoo::infill_program(tmpl, true), *uniform, lim);
  zoo::InfillTemplate two{{Seq(v.eos(), {v.id("a")}), Seq(v.eos(), {v.id("b")}), Seq(v.eos(), {v.id("a"), v.eos()})}, 0.5};
  lim.step.support_cap = 4;
  compare("infill, two holes", *zoo::infill(two, true), zoo::infill_program(two, true), *uniform, lim);
  const auto maxw = zoo::PrefixConstraint::max_word_length(v, 2, "b");
  for (bool masked : {false, true}) {
    auto hand = masked ? zoo::hard_constraint_masked(empty, maxw) : zoo::hard_constraint_plain(empty, maxw);
    auto prog = zoo::hard_constraint_program(empty, maxw, masked);
    compare(std::string(masked ? "masked" : "plain") + " hard constraint, runs of a at most 2", *hand, prog, *uniform, cap(8));
  }

  // observe(d, v) and sample(d, proposal = dirac(v)) must define the same model.
  bool exact = true;
  std::ostringstream d;
  auto same_both_ways = [&](const std::string& name, std::shared_ptr<const ppl::Program> obs,
                            std::shared_ptr<const ppl::Program> dirac, const LogitsBackend& backend,
                            const oracle::EnumerationLimits& l) {
    const auto mo = ppl::compile_program(std::move(obs));
    const auto md = ppl::compile_program(std::move(dirac));
    const auto po = enumerate(*mo, backend, l);
    const auto pd = enumerate(*md, backend, l);
    bool ok = po.mass == pd.mass && po.log_z == pd.log_z;
    for (std::uint64_t seed : {1, 2, 3}) {
      SmcConfig cfg;
      cfg.n_particles = 8;
      cfg.seed = seed;
      ok = ok && same_particles(run_allowing_unreachable(*mo, cfg, backend), run_allowing_unreachable(*md, cfg, backend));
    }
    exact = exact && ok;
    d << name << (ok ? " identical; " : " DIFFER; ");
  };
  const auto heavy = toy::eos_heavy_abe();
  oracle::EnumerationLimits il;
  il.length_cap = 64;
  il.step.support_cap = 8;
  same_both_ways("infill", zoo::infill_program(tmpl, true, zoo::ObserveStyle::kObserve),
                 zoo::infill_program(tmpl, true, zoo::ObserveStyle::kSampleDirac), *heavy, il);
  const auto it = toy::intersect_toy();
  for (bool lo : {false, true})
    same_both_ways(lo ? "intersect-locally-optimal" : "intersect-single-proposal",
                   zoo::intersect_program(it.prompts, lo, zoo::ObserveStyle::kObserve),
                   zoo::intersect_program(it.prompts, lo, zoo::ObserveStyle::kSampleDirac), *it.backend, cap(8));
  res.checks.push_back({"observe == sample with a Dirac proposal (enumeration and SMC, exact)", exact, d.str()});
  res.seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// 9

SuiteResult baselines(const SuiteOptions&) {
  SuiteResult res{9, "baselines", "baseline phenomena", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();

  // Greedy masking on the trap.
  const auto tr = toy::trap();
  constexpr std::size_t kTrials = 20000;
  std::size_t stuck = 0;
  {
    TrieCache cache(*tr.backend);
    const Seq prompt(tr.backend->vocab().eos());
    for (std::size_t i = 0; i < kTrials; ++i) {
      Rng rng = Rng::substream(9, i, 0, 0);
      if (zoo::greedy_masked_decode(prompt, tr.constraint, cache, rng).dead_end) ++stuck;
    }
  }
  const double f = static_cast<double>(stuck) / kTrials;
  const double se = std::sqrt(tr.trap_mass * (1.0 - tr.trap_mass) / kTrials);
  res.checks.push_back({"greedy masking dead-ends on the trap at the trap mass (3 SE)", std::abs(f - tr.trap_mass) <= 3.0 * se,
                        fmt(f) + " vs " + fmt(tr.trap_mass) + " (3 SE = " + fmt(3.0 * se, 3) + ")"});

  // Greedy masking with a satisfiable-everywhere constraint never gets stuck.
  const Vocab v = toy::abe_vocab();
  const auto uniform = toy::uniform_abe();
  {
    TrieCache cache(*uniform);
    const auto c = zoo::PrefixConstraint::forbid_tokens(v, {v.id("b")});
    std::size_t n_stuck = 0;
    for (std::size_t i = 0; i < 2000; ++i) {
      Rng rng = Rng::substream(10, i, 0, 0);
      if (zoo::greedy_masked_decode(Seq(v.eos()), c, cache, rng).dead_end) ++n_stuck;
    }
    res.checks.push_back({"greedy masking never stuck under \"no b\"", n_stuck == 0, std::to_string(n_stuck) + " dead ends"});
  }

  // Exhaustive-width beam equals the oracle argmax.
  auto exhaustive = [&](const std::string& name, const FkModel& model, const LogitsBackend& backend, int max_len) {
    const auto post = enumerate(model, backend, cap(static_cast<std::size_t>(max_len)));
    auto best = std::max_element(post.mass.begin(), post.mass.end(),
                                 [](const auto& x, const auto& y) { return x.second < y.second; });
    std::size_t width = 1;
    for (int i = 0; i < max_len; ++i) width *= backend.vocab().size();
    TrieCache cache(backend);
    const auto beam = zoo::beam_search(model, cache, width, max_len);
    const bool ok = beam.found && best != post.mass.end() && beam.best.seq == best->first;
    res.checks.push_back({"exhaustive beam = oracle argmax: " + name, ok,
                          beam.found ? "beam " + beam.best.seq.to_text(backend.vocab()) + ", oracle " +
                                           best->first.to_text(backend.vocab())
                                     : "beam found nothing"});
  };
  const auto none = zoo::PrefixConstraint::none(v);
  const auto skewed = std::make_shared<TableBackend>(TableBackend::from_probabilities(v, {}, std::vector<double>{0.5, 0.3, 0.2}));
  exhaustive("runs of a at most 2, skewed backend",
             *zoo::hard_constraint_plain(Seq(v.eos()), zoo::PrefixConstraint::max_word_length(v, 2, "b")), *skewed, 5);
  const TokenId a = v.id("a"), b = v.id("b");
  const auto dominant = std::make_shared<TableBackend>(TableBackend::from_probabilities(
      v, {{{}, {0.9, 0.05, 0.05}}, {{a}, {0.05, 0.9, 0.05}}, {{a, b}, {0.9, 0.05, 0.05}}, {{a, b, a}, {0.05, 0.05, 0.9}}},
      std::vector<double>{0.34, 0.33, 0.33}));
  exhaustive("dominant long string", *zoo::hard_constraint_plain(Seq(v.eos()), none), *dominant, 5);

  // Length bias on the uniform backend.
  const auto vacuous = zoo::hard_constraint_plain(Seq(v.eos()), none);
  TrieCache cache(*uniform);
  const auto beam = zoo::beam_search(*vacuous, cache, 4, 8);
  double total_len = 0.0;
  constexpr std::size_t kSamples = 10000;
  for (std::size_t i = 0; i < kSamples; ++i) {
    Rng rng = Rng::substream(11, i, 0, 0);
    Seq s(v.eos());
    while (!s.terminated()) s = s.appended(static_cast<TokenId>(rng.categorical_log(*cache.next_logprobs(s))));
    total_len += static_cast<double>(s.size());
  }
  const double mean_len = total_len / kSamples;
  res.checks.push_back({"beam top-1 is shorter than the mean ancestral length (uniform backend)",
                        beam.found && static_cast<double>(beam.best.seq.size()) < mean_len,
                        "top-1 length " + std::to_string(beam.best.seq.size()) + ", mean length " + fmt(mean_len, 4)});
  res.seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// 10

SuiteResult determinism(const SuiteOptions&) {
  SuiteResult res{10, "determinism", "determinism", {}, 0.0};
  const auto start = std::chrono::steady_clock::now();
  using nlohmann::json;
  const json uniform{{"kind", "uniform"}, {"vocab", {{"chars", "ab"}}}};
  const json heavy{{"kind", "table"}, {"vocab", {{"chars", "ab"}}}, {"default", {0.2, 0.2, 0.6}}};
  json toy_rows = json::array();
  const auto it = toy::intersect_toy();
  for (const auto& [ctx, row] : dynamic_cast<const TableBackend&>(*it.backend).rows()) {
    json labels = json::array();
    for (TokenId t : ctx) labels.push_back(toy::abe_vocab().label(t));
    json probs = json::array();
    for (double lp : row) probs.push_back(std::exp(lp));
    toy_rows.push_back({{"context", labels}, {"probs", probs}});
  }
  const json toy_backend{{"kind", "table"}, {"vocab", {{"chars", "ab"}}}, {"rows", toy_rows}};
  const std::vector<std::pair<std::string, json>> configs{
      {"hard-constraint plain",
       {{"model", {{"kind", "hard-constraint"}, {"variant", "plain"}, {"constraint", {{"kind", "forbid"}, {"tokens", {"b"}}}}}},
        {"backend", uniform}, {"particles", 8}, {"factor", 3}, {"seed", 1}}},
      {"hard-constraint masked program",
       {{"model",
         {{"kind", "hard-constraint"}, {"variant", "masked"}, {"formulation", "program"},
          {"constraint", {{"kind", "max-word-length"}, {"max", 2}, {"separator", "b"}}}}},
        {"backend", uniform}, {"particles", 16}, {"factor", 2}, {"seed", 5}}},
      {"infill", {{"model", {{"kind", "infill"}, {"fragments", {"", "b"}}}}, {"backend", heavy}, {"particles", 8}, {"seed", 3}}},
      {"intersect locally-optimal",
       {{"model", {{"kind", "intersect"}, {"prompts", {"a", "b"}}, {"locally_optimal", true}}},
        {"backend", toy_backend}, {"particles", 8}, {"seed", 11}}},
  };
  for (const auto& [name, doc] : configs) {
    std::vector<app::RunOutput> outs;
    for (std::size_t threads : {1, 1, 4, 4}) {
      auto cfg = app::RunConfig::from_json(doc);
      cfg.threads = threads;
      outs.push_back(app::execute_run(cfg));
    }
    bool same = true;
    for (const auto& o : outs)
      same = same && o.particles_jsonl == outs[0].particles_jsonl && o.summary_json == outs[0].summary_json &&
             o.exit_code == outs[0].exit_code;
    // The echoed config runs again to the same outputs.
    const auto echoed = app::RunConfig::from_json(json::parse(outs[0].summary_json).at("config"));
    const auto again = app::execute_run(echoed);
    same = same && again.particles_jsonl == outs[0].particles_jsonl && again.summary_json == outs[0].summary_json;
    res.checks.push_back({name + ": byte-identical outputs (repeat runs, 1 and 4 threads, echoed config)", same,
                          std::to_string(outs[0].particles_jsonl.size() + outs[0].summary_json.size()) + " bytes"});
  }
  res.seconds = seconds_since(start);
  return res;
}

using SuiteFn = SuiteResult (*)(const SuiteOptions&);

const std::vector<std::pair<std::string, SuiteFn>>& registry() {
  static const std::vector<std::pair<std::string, SuiteFn>> r{
      {"exact-recovery", exact_recovery}, {"unbiasedness", unbiasedness}, {"jensen", jensen},
      {"equivalence", equivalence},       {"compare", compare},           {"resampler", resampler},
      {"cache", cache_efficiency},        {"ppl", ppl_semantics},         {"baselines", baselines},
      {"determinism", determinism},
  };
  return r;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, fn] : registry()) n.push_back(name);
    return n;
  }();
  return names;
}

SuiteResult run_suite(const std::string& name, const SuiteOptions& opts) {
  for (const auto& [n, fn] : registry()) {
    if (n != name) continue;
    const auto start = std::chrono::steady_clock::now();
    SuiteResult r = fn(opts);
    r.seconds = seconds_since(start);
    return r;
  }
  throw std::invalid_argument("unknown suite '" + name + "'");
}

std::vector<SuiteResult> run_suites(const std::string& name, const SuiteOptions& opts) {
  std::vector<SuiteResult> out;
  if (name == "all") {
    for (const auto& n : suite_names()) out.push_back(run_suite(n, opts));
  } else {
    out.push_back(run_suite(name, opts));
  }
  return out;
}

nlohmann::json to_json(const std::vector<SuiteResult>& results) {
  nlohmann::json arr = nlohmann::json::array();
  bool all = true;
  for (const auto& r : results) {
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& c : r.checks) checks.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    arr.push_back({{"criterion", r.criterion},
                   {"suite", r.suite},
                   {"title", r.title},
                   {"pass", r.pass()},
                   {"seconds", r.seconds},
                   {"checks", checks}});
    all = all && r.pass();
  }
  return {{"pass", all}, {"suites", arr}};
}

}  // namespace smcsteer::suites
