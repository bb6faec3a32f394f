#include "smcsteer/seqcore.hpp"

#include <set>

namespace smcsteer {

Vocab::Vocab(std::vector<std::string> tokens, std::string_view eos_label) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2) throw std::invalid_argument("vocab needs EOS plus at least one content token");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw std::invalid_argument("duplicate token label '" + tokens_[i] + "'");
  }
  auto it = index_.find(std::string(eos_label));
  if (it == index_.end()) throw std::invalid_argument("EOS label '" + std::string(eos_label) + "' not in vocab");
  eos_ = it->second;
}

Vocab Vocab::from_characters(std::string_view chars, std::string_view eos_label) {
  auto split = split_characters(chars);
  std::set<std::string> uniq(split.begin(), split.end());
  std::vector<std::string> tokens(uniq.begin(), uniq.end());
  tokens.emplace_back(eos_label);
  return Vocab(std::move(tokens), eos_label);
}

const std::string& Vocab::label(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw std::out_of_range("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::id(std::string_view label) const {
  auto it = index_.find(std::string(label));
  if (it == index_.end()) throw std::out_of_range("unknown token label '" + std::string(label) + "'");
  return it->second;
}

bool Vocab::contains(std::string_view label) const { return index_.count(std::string(label)) != 0; }

std::vector<std::string> split_characters(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    len = std::min(len, text.size() - i);
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

Seq::Seq(TokenId eos, std::vector<TokenId> ids) : eos_(eos), ids_(std::move(ids)) {
  for (std::size_t i = 0; i + 1 < ids_.size(); ++i)
    if (ids_[i] == eos_) throw ContractViolation("EOS may only appear as the final token");
}

Seq Seq::from_text(const Vocab& vocab, std::string_view text) {
  auto chars = split_characters(text);
  return from_labels(vocab, chars);
}

Seq Seq::from_labels(const Vocab& vocab, std::span<const std::string> labels) {
  std::vector<TokenId> ids;
  ids.reserve(labels.size());
  for (const auto& l : labels) ids.push_back(vocab.id(l));
  return Seq(vocab.eos(), std::move(ids));
}

Seq Seq::appended(TokenId tok) const {
  if (terminated()) throw ContractViolation("cannot append to an EOS-terminated sequence");
  if (tok < 0) throw ContractViolation("invalid token id");
  Seq out = *this;
  out.ids_.push_back(tok);
  return out;
}

Seq Seq::concat(std::span<const TokenId> tail) const {
  Seq out = *this;
  for (TokenId t : tail) out = out.appended(t);
  return out;
}

std::string Seq::to_text(const Vocab& vocab) const {
  std::string out;
  for (TokenId t : ids_) {
    if (t == eos_) break;
    out += vocab.label(t);
  }
  return out;
}

std::vector<std::string> Seq::labels(const Vocab& vocab) const {
  std::vector<std::string> out;
  out.reserve(ids_.size());
  for (TokenId t : ids_) out.push_back(vocab.label(t));
  return out;
}

std::size_t SeqHash::operator()(const Seq& s) const noexcept {
  std::size_t h = 1469598103934665603ull;
  for (TokenId t : s.ids()) {
    h ^= static_cast<std::size_t>(static_cast<std::uint32_t>(t));
    h *= 1099511628211ull;
  }
  return h;
}

Rng::Rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  engine_.seed(seq);
}

Rng Rng::substream(std::uint64_t seed, std::uint64_t step, std::uint64_t tag, std::uint64_t slot) {
  Rng r;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(tag),  static_cast<std::uint32_t>(slot),
                    static_cast<std::uint32_t>(slot >> 32)};
  r.engine_.seed(seq);
  return r;
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::size_t Rng::categorical_log(std::span<const double> logp) {
  if (logp.empty()) throw ContractViolation("categorical over empty support");
  double total = 0.0;
  for (double lp : logp) total += std::exp(lp);
  double u = uniform() * total;
  std::size_t last_positive = logp.size();
  for (std::size_t i = 0; i < logp.size(); ++i) {
    double p = std::exp(logp[i]);
    if (p <= 0.0) continue;
    last_positive = i;
    if (u < p) return i;
    u -= p;
  }
  if (last_positive == logp.size()) throw ContractViolation("categorical with no positive mass");
  return last_positive;
}

StepResult FkModel::step(int t, const State& state, Rng& rng, NextTokenSource& lm) const {
  if (state.terminated()) throw ContractViolation(name() + ": step called on a terminal state");
  if (t < 1) throw ContractViolation("step index starts at 1");
  return do_step(t, state, rng, lm);
}

EnumerableStep FkModel::enumerate(int t, const State& state, NextTokenSource& lm, const EnumerateOptions& opts) const {
  if (state.terminated()) throw ContractViolation(name() + ": enumerate called on a terminal state");
  if (!enumerable()) throw ContractViolation(name() + " does not support enumeration");
  return do_enumerate(t, state, lm, opts);
}

}  // namespace smcsteer
