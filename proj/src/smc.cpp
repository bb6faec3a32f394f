#include "smcsteer/smc.hpp"

#include <atomic>
#include <exception>
#include <numeric>
#include <thread>

namespace smcsteer {

namespace {

// Runs fn(i) for i in [0, n). Exceptions are rethrown in index order so the
// reported failure does not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    const std::size_t workers = std::min(threads, n);
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) guarded(i);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

void SmcConfig::validate() const {
  if (n_particles < 1) throw std::invalid_argument("n_particles must be >= 1");
  if (expansion_factor < 1) throw std::invalid_argument("expansion_factor must be >= 1");
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
}

std::optional<double> find_cstar(std::span<const double> norm_weights, std::size_t n) {
  if (n < 1) throw ContractViolation("find_cstar: n must be >= 1");
  std::vector<double> w;
  w.reserve(norm_weights.size());
  double total = 0.0;
  for (double x : norm_weights) {
    if (x < 0.0 || std::isnan(x)) throw ContractViolation("find_cstar: weights must be non-negative");
    total += x;
    if (x > 0.0) w.push_back(x);
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractViolation("find_cstar: weights must sum to 1");
  if (w.size() <= n) return std::nullopt;

  std::sort(w.begin(), w.end(), std::greater<>());
  // suffix[k] = sum of w[k..]; summed from the small end to limit rounding.
  std::vector<double> suffix(w.size() + 1, 0.0);
  for (std::size_t k = w.size(); k-- > 0;) suffix[k] = suffix[k + 1] + w[k];

  // With the k largest weights saturated, sum min(1, c w) = k + c * suffix[k]
  // on the segment where c w[k] <= 1; the first k whose root lies on its own
  // segment gives the infimum.
  for (std::size_t k = 0; k < n; ++k) {
    const double c = static_cast<double>(n - k) / suffix[k];
    if (c * w[k] <= 1.0) return c;
  }
  // Unreachable when more than n weights are positive; keep the last root.
  return 1.0 / suffix[n - 1];
}

Selection select_without_replacement(std::span<const double> norm_weights, std::size_t n, Rng& rng) {
  Selection sel;
  auto cstar = find_cstar(norm_weights, n);
  if (!cstar) {
    sel.keep_all = true;
    for (std::size_t i = 0; i < norm_weights.size(); ++i)
      if (norm_weights[i] > 0.0) sel.deterministic.push_back(i);
    return sel;
  }
  sel.cstar = *cstar;
  const double c = *cstar;

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < norm_weights.size(); ++i)
    if (norm_weights[i] > 0.0) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norm_weights[a] > norm_weights[b]; });

  // Saturated items form a prefix of the sorted order. Items the c* scan put on
  // the saturated side count as deterministic even if c*w rounds just below 1.
  std::size_t n_det = 0;
  {
    std::vector<double> sorted(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = norm_weights[order[i]];
    std::vector<double> suffix(sorted.size() + 1, 0.0);
    for (std::size_t k = sorted.size(); k-- > 0;) suffix[k] = suffix[k + 1] + sorted[k];
    std::size_t k_scan = n - 1;
    for (std::size_t k = 0; k < n; ++k) {
      if (static_cast<double>(n - k) / suffix[k] * sorted[k] <= 1.0) {
        k_scan = k;
        break;
      }
    }
    n_det = k_scan;
    while (n_det < order.size() && c * sorted[n_det] >= 1.0) ++n_det;
    n_det = std::min(n_det, n);
  }
  std::vector<bool> is_det(norm_weights.size(), false);
  for (std::size_t i = 0; i < n_det; ++i) {
    is_det[order[i]] = true;
    sel.deterministic.push_back(order[i]);
  }
  std::sort(sel.deterministic.begin(), sel.deterministic.end());

  const std::size_t m = n - n_det;
  if (m == 0) return sel;

  std::vector<std::size_t> stoch;
  double stoch_mass = 0.0;
  for (std::size_t i = 0; i < norm_weights.size(); ++i) {
    if (norm_weights[i] > 0.0 && !is_det[i]) {
      stoch.push_back(i);
      stoch_mass += norm_weights[i];
    }
  }

  // Stratified pass in units of alpha = stoch_mass / m: points u, u+1, ...,
  // u+m-1 with u ~ Uniform[0, 1); item i is taken when a point falls in its
  // slice of the cumulative weight.
  const double md = static_cast<double>(m);
  const double u = rng.uniform();
  auto points_below = [&](double x) {
    const double cnt = std::ceil(x - u);
    return static_cast<std::size_t>(std::clamp(cnt, 0.0, md));
  };
  double cum = 0.0;
  std::size_t taken = 0;
  for (std::size_t j = 0; j < stoch.size(); ++j) {
    cum = (j + 1 == stoch.size()) ? md : cum + norm_weights[stoch[j]] / stoch_mass * md;
    const std::size_t below = points_below(cum);
    if (below > taken) {
      sel.stratified.push_back(stoch[j]);
      taken = below;
    }
  }
  // Rounding can merge two points into one slice; top up with the heaviest
  // unselected items so the population size stays exactly n.
  if (sel.stratified.size() < m) {
    std::vector<bool> chosen(norm_weights.size(), false);
    for (auto i : sel.stratified) chosen[i] = true;
    std::vector<std::size_t> rest;
    for (auto i : stoch)
      if (!chosen[i]) rest.push_back(i);
    std::stable_sort(rest.begin(), rest.end(),
                     [&](std::size_t a, std::size_t b) { return norm_weights[a] > norm_weights[b]; });
    for (std::size_t i = 0; sel.stratified.size() < m && i < rest.size(); ++i) sel.stratified.push_back(rest[i]);
    std::sort(sel.stratified.begin(), sel.stratified.end());
  }
  return sel;
}

std::vector<Particle> downsample_without_replacement(std::vector<Particle> candidates, std::size_t n, Rng& rng,
                                                     bool uncorrected_stratified_weights) {
  std::vector<double> logw(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) logw[i] = candidates[i].log_weight;
  const double log_total = log_sum_exp(logw);
  if (log_total == kNegInf) throw ContractViolation("downsample: every candidate has zero weight");

  std::vector<double> norm(candidates.size());
  for (std::size_t i = 0; i < norm.size(); ++i) norm[i] = std::exp(logw[i] - log_total);
  // Renormalize after exponentiation so the sum is 1 to rounding.
  const double s = std::accumulate(norm.begin(), norm.end(), 0.0);
  for (double& x : norm) x /= s;

  const Selection sel = select_without_replacement(norm, n, rng);
  const double log_n = std::log(static_cast<double>(n));
  const double log_np = std::log(static_cast<double>(candidates.size()));

  std::vector<Particle> out;
  out.reserve(sel.deterministic.size() + sel.stratified.size());
  for (std::size_t i : sel.deterministic) {
    Particle p = std::move(candidates[i]);
    p.log_weight += log_n - log_np;
    out.push_back(std::move(p));
  }
  const double strat_log_weight = log_n - std::log(sel.cstar) - log_np + log_total;
  for (std::size_t i : sel.stratified) {
    Particle p = std::move(candidates[i]);
    p.log_weight = uncorrected_stratified_weights ? p.log_weight + log_n - log_np : strat_log_weight;
    out.push_back(std::move(p));
  }
  return out;
}

double log_mean_weight(std::span<const Particle> particles, std::size_t n) {
  std::vector<double> lw;
  lw.reserve(particles.size());
  for (const auto& p : particles) lw.push_back(p.log_weight);
  return log_sum_exp(lw) - std::log(static_cast<double>(n));
}

SmcResult smc_run(const FkModel& model, const SmcConfig& cfg, const LogitsBackend& backend) {
  TrieCache cache(backend, cfg.cache_mode);
  return smc_run(model, cfg, cache);
}

SmcResult smc_run(const FkModel& model, const SmcConfig& cfg, NextTokenSource& lm) {
  cfg.validate();
  const std::size_t n = cfg.n_particles;
  const std::size_t k = cfg.expansion_factor;
  const double log_n = std::log(static_cast<double>(n));
  const double log_k = std::log(static_cast<double>(k));
  auto* cache = dynamic_cast<TrieCache*>(&lm);

  std::vector<Particle> particles(n, Particle{model.initial_state(), 0.0});

  auto finish = [&](int steps, std::vector<Particle> ps) {
    SmcResult r;
    r.log_zhat = ps.empty() ? kNegInf : log_mean_weight(ps, n);
    r.particles = std::move(ps);
    r.steps_taken = steps;
    if (cache != nullptr) r.cache_stats = cache->stats();
    return r;
  };

  auto any_live = [](const std::vector<Particle>& ps) {
    return std::any_of(ps.begin(), ps.end(), [](const Particle& p) { return !p.state.terminated(); });
  };

  int t = 1;
  for (; any_live(particles); ++t) {
    if (t > cfg.max_steps)
      throw StepCapExceeded("live particles remain after " + std::to_string(cfg.max_steps) + " steps",
                            finish(t - 1, std::move(particles)));

    // Candidate slots: one per stopped particle, k per live particle.
    std::vector<std::size_t> parent;
    for (std::size_t i = 0; i < particles.size(); ++i) {
      const std::size_t ki = particles[i].state.terminated() ? 1 : k;
      for (std::size_t j = 0; j < ki; ++j) parent.push_back(i);
    }
    const std::size_t n_cand = parent.size();
    const double log_np = std::log(static_cast<double>(n_cand));

    std::vector<Particle> candidates(n_cand, Particle{State{Seq(lm.vocab().eos()), {}}, kNegInf});
    parallel_for(n_cand, cfg.threads, [&](std::size_t slot) {
      const Particle& src = particles[parent[slot]];
      if (src.state.terminated()) {
        candidates[slot] = Particle{src.state, src.log_weight + log_np - log_n};
        return;
      }
      Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(t), kExpandTag, slot);
      StepResult step = model.step(t, src.state, rng, lm);
      candidates[slot] = Particle{std::move(step.next), src.log_weight + log_np - log_k - log_n + step.log_potential};
    });

    const bool all_dead = std::all_of(candidates.begin(), candidates.end(),
                                      [](const Particle& p) { return p.log_weight == kNegInf; });
    if (all_dead) {
      SmcResult partial = finish(t, std::move(candidates));
      partial.log_zhat = kNegInf;
      throw PosteriorUnreachable("every candidate weight is zero at step " + std::to_string(t), std::move(partial));
    }

    Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(t), kResampleTag, 0);
    particles = downsample_without_replacement(std::move(candidates), n, rng, cfg.uncorrected_stratified_weights);
  }
  return finish(t - 1, std::move(particles));
}

}  // namespace smcsteer
