#include "smcsteer/ppl.hpp"

namespace smcsteer::ppl {

Dist Dist::next_token(LogProbs logprobs) {
  if (!logprobs || logprobs->empty()) throw ContractViolation("next_token distribution needs log-probabilities");
  Dist d;
  d.kind_ = Kind::kNextToken;
  d.logprobs_ = std::move(logprobs);
  return d;
}

Dist Dist::geometric(double p) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("geometric parameter must lie in (0, 1]");
  Dist d;
  d.kind_ = Kind::kGeometric;
  d.p_ = p;
  return d;
}

Dist Dist::dirac(std::int64_t value) {
  Dist d;
  d.kind_ = Kind::kDirac;
  d.value_ = value;
  return d;
}

Dist Dist::categorical(std::span<const double> probs) {
  std::vector<double> lp(probs.size());
  double total = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw std::invalid_argument("categorical probabilities must be non-negative");
    total += p;
  }
  if (!(total > 0.0)) throw std::invalid_argument("categorical needs positive mass");
  for (std::size_t i = 0; i < probs.size(); ++i) lp[i] = probs[i] > 0.0 ? std::log(probs[i] / total) : kNegInf;
  return categorical_log(std::move(lp));
}

Dist Dist::categorical_log(std::vector<double> logprobs) {
  if (logprobs.empty()) throw std::invalid_argument("categorical over an empty support");
  Dist d;
  d.kind_ = Kind::kCategorical;
  d.logprobs_ = std::make_shared<const std::vector<double>>(std::move(logprobs));
  return d;
}

Dist Dist::flat() {
  Dist d;
  d.kind_ = Kind::kFlat;
  return d;
}

double Dist::log_prob(std::int64_t value) const {
  switch (kind_) {
    case Kind::kNextToken:
    case Kind::kCategorical:
      if (value < 0 || static_cast<std::size_t>(value) >= logprobs_->size()) return kNegInf;
      return (*logprobs_)[static_cast<std::size_t>(value)];
    case Kind::kGeometric:
      if (value < 0) return kNegInf;
      if (p_ == 1.0) return value == 0 ? 0.0 : kNegInf;
      return std::log(p_) + static_cast<double>(value) * std::log1p(-p_);
    case Kind::kDirac:
      return value == value_ ? 0.0 : kNegInf;
    case Kind::kFlat:
      return value >= 0 ? 0.0 : kNegInf;
  }
  return kNegInf;
}

std::int64_t Dist::sample(Rng& rng) const {
  switch (kind_) {
    case Kind::kNextToken:
    case Kind::kCategorical:
      return static_cast<std::int64_t>(rng.categorical_log(*logprobs_));
    case Kind::kGeometric: {
      if (p_ == 1.0) return 0;
      const double u = rng.uniform();
      return static_cast<std::int64_t>(std::floor(std::log1p(-u) / std::log1p(-p_)));
    }
    case Kind::kDirac:
      return value_;
    case Kind::kFlat:
      throw ContractViolation("cannot sample from the flat measure; pass a proposal");
  }
  return 0;
}

std::vector<std::pair<std::int64_t, double>> Dist::support(int cap, bool* truncated) const {
  std::vector<std::pair<std::int64_t, double>> out;
  bool cut = false;
  switch (kind_) {
    case Kind::kNextToken:
    case Kind::kCategorical:
      for (std::size_t i = 0; i < logprobs_->size(); ++i)
        if ((*logprobs_)[i] > kNegInf) out.emplace_back(static_cast<std::int64_t>(i), (*logprobs_)[i]);
      break;
    case Kind::kGeometric:
      if (p_ == 1.0) {
        out.emplace_back(0, 0.0);
      } else {
        for (std::int64_t k = 0; k <= cap; ++k) out.emplace_back(k, log_prob(k));
        cut = true;
      }
      break;
    case Kind::kDirac:
      out.emplace_back(value_, 0.0);
      break;
    case Kind::kFlat:
      throw ContractViolation("the flat measure has no enumerable support");
  }
  if (truncated != nullptr) *truncated = cut;
  return out;
}

// ---------------------------------------------------------------------------

std::int64_t Runtime::sample(const Dist& dist) {
  if (finished()) throw ContractViolation("sample after finish");
  return chooser_.choose(dist).first;
}

std::int64_t Runtime::sample(const Dist& dist, const Dist& proposal) {
  if (finished()) throw ContractViolation("sample after finish");
  auto [value, log_q] = chooser_.choose(proposal);
  log_potential_ += dist.log_prob(value) - log_q;
  return value;
}

void Runtime::observe(const Dist& dist, std::int64_t value) { log_potential_ += dist.log_prob(value); }

void Runtime::condition(bool flag) {
  if (!flag) log_potential_ = kNegInf;
}

Dist Runtime::transformer(const Seq& context) { return Dist::next_token(lm_.next_logprobs({}, context.ids())); }

Dist Runtime::transformer(const Seq& prompt, const Seq& continuation) {
  return Dist::next_token(lm_.next_logprobs(prompt.ids(), continuation.ids()));
}

void Runtime::finish() { state_.seq = state_.seq.appended(eos()); }

// ---------------------------------------------------------------------------

namespace {

class RandomChooser final : public Chooser {
 public:
  explicit RandomChooser(Rng& rng) : rng_(rng) {}
  std::pair<std::int64_t, double> choose(const Dist& proposal) override {
    const std::int64_t v = proposal.sample(rng_);
    return {v, proposal.log_prob(v)};
  }

 private:
  Rng& rng_;
};

struct ChoicePoint {
  std::vector<std::pair<std::int64_t, double>> support;
  std::size_t index = 0;
};

// Replays a recorded prefix of choices, then extends the trace with the first
// value of each new choice point.
class TraceChooser final : public Chooser {
 public:
  TraceChooser(std::vector<ChoicePoint>& trace, int cap) : trace_(trace), cap_(cap) {}

  std::pair<std::int64_t, double> choose(const Dist& proposal) override {
    if (pos_ < trace_.size()) {
      const auto& pt = trace_[pos_++];
      return pt.support[pt.index];
    }
    bool cut = false;
    ChoicePoint pt{proposal.support(cap_, &cut), 0};
    truncated_ = truncated_ || cut;
    if (pt.support.empty()) throw ContractViolation("sample site with empty support");
    trace_.push_back(std::move(pt));
    ++pos_;
    return trace_.back().support.front();
  }

  std::size_t consumed() const { return pos_; }
  bool truncated() const { return truncated_; }

 private:
  std::vector<ChoicePoint>& trace_;
  int cap_;
  std::size_t pos_ = 0;
  bool truncated_ = false;
};

}  // namespace

StepResult ProgramModel::do_step(int t, const State& state, Rng& rng, NextTokenSource& lm) const {
  RandomChooser chooser(rng);
  Runtime rt(state, t, lm, chooser);
  program_->step(rt);
  const double lp = rt.log_potential();
  return {std::move(rt).take_state(), lp};
}

EnumerableStep ProgramModel::do_enumerate(int t, const State& state, NextTokenSource& lm,
                                          const EnumerateOptions& opts) const {
  EnumerableStep out;
  std::vector<ChoicePoint> trace;
  while (true) {
    TraceChooser chooser(trace, opts.support_cap);
    Runtime rt(state, t, lm, chooser);
    program_->step(rt);
    if (chooser.consumed() != trace.size()) throw ContractViolation(name() + ": step is not deterministic given its choices");
    out.truncated = out.truncated || chooser.truncated();

    double log_q = 0.0;
    for (const auto& pt : trace) log_q += pt.support[pt.index].second;
    const double lp = rt.log_potential();
    out.transitions.push_back(Transition{std::move(rt).take_state(), std::exp(log_q), lp});

    while (!trace.empty() && trace.back().index + 1 >= trace.back().support.size()) trace.pop_back();
    if (trace.empty()) break;
    ++trace.back().index;
  }
  return out;
}

std::shared_ptr<const FkModel> compile_program(std::shared_ptr<const Program> program, double tail_factor) {
  return std::make_shared<ProgramModel>(std::move(program), tail_factor);
}

}  // namespace smcsteer::ppl
