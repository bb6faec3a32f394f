#include "smcsteer/oracle.hpp"

#include <atomic>
#include <limits>
#include <thread>

namespace smcsteer::oracle {

double ExactPosterior::prob(const Seq& s) const {
  if (null_posterior()) return 0.0;
  auto it = mass.find(s);
  return it == mass.end() ? 0.0 : it->second / z();
}

Dist ExactPosterior::normalized() const {
  Dist out;
  if (null_posterior()) return out;
  const double zz = z();
  for (const auto& [s, m] : mass) out.emplace(s, m / zz);
  return out;
}

double ExactPosterior::integrate(const std::function<double(const Seq&)>& f) const {
  double total = 0.0;
  for (const auto& [s, m] : mass) total += m * f(s);
  return total;
}

ExactPosterior enumerate_posterior(const FkModel& model, NextTokenSource& lm, const EnumerationLimits& limits) {
  if (!model.enumerable()) throw ContractViolation(model.name() + " does not expose enumerable steps");
  ExactPosterior out;
  double cut_mass = 0.0;

  // Weighted DFS; `log_w` is log(kernel prob * potentials) along the path.
  std::function<void(int, const State&, double)> expand = [&](int t, const State& state, double log_w) {
    if (state.terminated()) {
      out.mass[state.seq] += std::exp(log_w);
      return;
    }
    if (state.seq.size() >= limits.length_cap || t > limits.max_steps) {
      cut_mass += std::exp(log_w);
      return;
    }
    EnumerableStep step = model.enumerate(t, state, lm, limits.step);
    double covered = 0.0;
    for (auto& tr : step.transitions) {
      covered += tr.prob;
      if (tr.prob <= 0.0 || tr.log_potential == kNegInf) continue;
      expand(t + 1, tr.next, log_w + std::log(tr.prob) + tr.log_potential);
    }
    if (step.truncated) cut_mass += std::exp(log_w) * std::max(0.0, 1.0 - covered);
  };
  expand(1, model.initial_state(), 0.0);

  double total = 0.0;
  for (const auto& [s, m] : out.mass) total += m;
  out.log_z = total > 0.0 ? std::log(total) : kNegInf;
  const double factor = model.tail_factor();
  out.tail_mass_bound = cut_mass > 0.0 ? cut_mass * factor : 0.0;
  return out;
}

void EmpiricalPool::add_run(std::span<const Particle> particles) {
  ++runs_;
  std::vector<double> lw;
  for (const auto& p : particles) lw.push_back(p.log_weight);
  const double log_total = log_sum_exp(lw);
  if (log_total == kNegInf) return;
  for (const auto& p : particles)
    if (p.log_weight > kNegInf) total_[p.state.seq] += std::exp(p.log_weight - log_total);
}

Dist EmpiricalPool::distribution() const {
  Dist out;
  double total = 0.0;
  for (const auto& [s, w] : total_) total += w;
  if (total <= 0.0) return out;
  for (const auto& [s, w] : total_) out.emplace(s, w / total);
  return out;
}

namespace {

Dist normalize(const Dist& d) {
  double total = 0.0;
  for (const auto& [s, w] : d) {
    if (w < 0.0) throw ContractViolation("distribution with negative mass");
    total += w;
  }
  Dist out;
  if (total <= 0.0) return out;
  for (const auto& [s, w] : d) out.emplace(s, w / total);
  return out;
}

template <class Fn>
void parallel_over(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(threads, n); ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

double tv_distance(const Dist& p_raw, const Dist& q_raw) {
  const Dist p = normalize(p_raw);
  const Dist q = normalize(q_raw);
  double sum = 0.0;
  for (const auto& [s, pv] : p) {
    auto it = q.find(s);
    sum += std::abs(pv - (it == q.end() ? 0.0 : it->second));
  }
  for (const auto& [s, qv] : q)
    if (!p.count(s)) sum += qv;
  return std::clamp(0.5 * sum, 0.0, 1.0);
}

double kl_divergence(const Dist& p_raw, const Dist& q_raw) {
  constexpr double kEps = 1e-12;
  const Dist p = normalize(p_raw);
  const Dist q = normalize(q_raw);
  double kl = 0.0;
  for (const auto& [s, pv] : p) {
    if (pv <= 0.0) continue;
    auto it = q.find(s);
    const double qv = it == q.end() ? 0.0 : it->second;
    if (qv <= 0.0) {
      if (pv > kEps) return std::numeric_limits<double>::infinity();
      continue;
    }
    kl += pv * std::log(pv / qv);
  }
  return std::max(0.0, kl);
}

std::vector<SmcResult> run_seeds(const FkModel& model, const LogitsBackend& backend, const SmcConfig& cfg,
                                 std::size_t runs, std::size_t threads) {
  std::vector<SmcResult> results(runs);
  parallel_over(runs, threads, [&](std::size_t r) {
    SmcConfig c = cfg;
    c.seed = cfg.seed + r;
    try {
      results[r] = smc_run(model, c, backend);
    } catch (const PosteriorUnreachable& e) {
      results[r] = e.partial();
    }
  });
  return results;
}

MeanSe mean_se(std::span<const double> xs) {
  MeanSe out;
  if (xs.empty()) return out;
  double sum = 0.0;
  for (double x : xs) sum += x;
  out.mean = sum / static_cast<double>(xs.size());
  if (xs.size() < 2 || !std::isfinite(out.mean)) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.se = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  return out;
}

double seq_length(const Seq& s) { return static_cast<double>(s.size()); }

UnbiasednessReport unbiasedness_test(const FkModel& model, const LogitsBackend& backend, const SmcConfig& cfg,
                                     std::size_t runs, double exact_z, double exact_zf,
                                     const std::function<double(const Seq&)>& f, std::size_t threads) {
  const auto results = run_seeds(model, backend, cfg, runs, threads);
  std::vector<double> zs, zfs;
  zs.reserve(runs);
  zfs.reserve(runs);
  const double n = static_cast<double>(cfg.n_particles);
  for (const auto& r : results) {
    double z = 0.0, zf = 0.0;
    for (const auto& p : r.particles) {
      if (p.log_weight == kNegInf) continue;
      const double w = std::exp(p.log_weight);
      z += w;
      zf += w * f(p.state.seq);
    }
    zs.push_back(z / n);
    zfs.push_back(zf / n);
  }
  UnbiasednessReport rep;
  rep.runs = runs;
  const MeanSe z = mean_se(zs);
  const MeanSe zf = mean_se(zfs);
  rep.mean_zhat = z.mean;
  rep.se = z.se;
  rep.exact_z = exact_z;
  rep.mean_zf = zf.mean;
  rep.se_zf = zf.se;
  rep.exact_zf = exact_zf;
  // The small absolute slack only absorbs floating-point noise when SE is 0.
  auto within = [](double mean, double se, double exact) {
    return std::abs(mean - exact) <= 3.0 * se + 1e-9 * std::max(1.0, std::abs(exact));
  };
  rep.pass_z = within(z.mean, z.se, exact_z);
  rep.pass_f = within(zf.mean, zf.se, exact_zf);
  rep.pass = rep.pass_z && rep.pass_f;
  return rep;
}

}  // namespace smcsteer::oracle
